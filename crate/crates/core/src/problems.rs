//! Decoupled forward–backward problems and the benchmark cases.
//!
//! A [`BsdeProblem`] bundles the forward coefficients `b`, `σ`, the generator
//! `f(t, x, y, z)`, the terminal function `g`, and (when known) the decoupling
//! field `u` with `Y_t = u(t, X_t)`, `Z_t = ∇u(t, X_t) σ(t, X_t)`.
//!
//! The sign convention throughout is `-dY = f dt - Z dW`, which pairs with the
//! PDE `∂_t u + b·∇u + ½ tr(σσᵀ D²u) + f(t, x, u, (∇u)σ) = 0`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type TerminalGradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type GeneratorFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
/// Writes `∇_z f` into the slice and returns `∂_y f`.
pub type GeneratorPartialsFn = Arc<dyn Fn(f64, &[f64], f64, &[f64], &mut [f64]) -> f64 + Send + Sync>;

/// Drift coefficient `b(t, x)`.
#[derive(Clone)]
pub enum Drift {
    Constant(Vec<f64>),
    Field(VectorField),
}

impl Drift {
    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Constant(v) => out.copy_from_slice(v),
            Drift::Field(f) => f(t, x, out),
        }
    }

    pub fn constant(&self) -> Option<&[f64]> {
        match self {
            Drift::Constant(v) => Some(v),
            Drift::Field(_) => None,
        }
    }
}

/// Diffusion coefficient `σ(t, x)`, a row-major `d×d` matrix.
#[derive(Clone)]
pub enum Diffusion {
    Constant(Vec<f64>),
    Field(VectorField),
}

impl Diffusion {
    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Constant(m) => out.copy_from_slice(m),
            Diffusion::Field(f) => f(t, x, out),
        }
    }

    pub fn constant(&self) -> Option<&[f64]> {
        match self {
            Diffusion::Constant(m) => Some(m),
            Diffusion::Field(_) => None,
        }
    }
}

/// Step used by the central-difference fallback for generator partials.
const GENERATOR_FD_STEP: f64 = 1e-6;

/// The driver `f(t, x, y, z)` with optional analytic partials.
#[derive(Clone)]
pub struct Generator {
    value: GeneratorFn,
    partials: Option<GeneratorPartialsFn>,
    zero: bool,
}

impl Generator {
    pub fn new(value: GeneratorFn) -> Self {
        Self { value, partials: None, zero: false }
    }

    pub fn with_partials(value: GeneratorFn, partials: GeneratorPartialsFn) -> Self {
        Self { value, partials: Some(partials), zero: false }
    }

    pub fn zero() -> Self {
        let mut g = Self::with_partials(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _, dz: &mut [f64]| {
                dz.iter_mut().for_each(|v| *v = 0.0);
                0.0
            }),
        );
        g.zero = true;
        g
    }

    /// Whether this is the generator built by [`Generator::zero`].
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.value)(t, x, y, z)
    }

    pub fn has_analytic_partials(&self) -> bool {
        self.partials.is_some()
    }

    /// Returns `∂_y f` and writes `∇_z f` into `dz`.
    ///
    /// Falls back to central differences when no analytic partials were supplied.
    pub fn partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> f64 {
        if let Some(p) = &self.partials {
            return p(t, x, y, z, dz);
        }
        let h = GENERATOR_FD_STEP;
        let dy = (self.eval(t, x, y + h, z) - self.eval(t, x, y - h, z)) / (2.0 * h);
        let mut zz = z.to_vec();
        for j in 0..z.len() {
            zz[j] = z[j] + h;
            let fp = self.eval(t, x, y, &zz);
            zz[j] = z[j] - h;
            let fm = self.eval(t, x, y, &zz);
            zz[j] = z[j];
            dz[j] = (fp - fm) / (2.0 * h);
        }
        dy
    }

    /// `∂_y f` only.
    pub fn dy(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        if let Some(p) = &self.partials {
            let mut dz = vec![0.0; z.len()];
            return p(t, x, y, z, &mut dz);
        }
        let h = GENERATOR_FD_STEP;
        (self.eval(t, x, y + h, z) - self.eval(t, x, y - h, z)) / (2.0 * h)
    }
}

/// Closed-form decoupling field `u` and its spatial gradient.
#[derive(Clone)]
pub struct ExactSolution {
    pub u: ScalarField,
    pub grad_u: VectorField,
}

#[derive(Clone)]
pub struct BsdeProblem {
    name: String,
    dim: usize,
    horizon: f64,
    x0: Vec<f64>,
    drift: Drift,
    diffusion: Diffusion,
    generator: Generator,
    terminal: TerminalFn,
    terminal_grad: Option<TerminalGradFn>,
    exact: Option<ExactSolution>,
}

impl fmt::Debug for BsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BsdeProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("has_terminal_grad", &self.terminal_grad.is_some())
            .field("has_exact", &self.exact.is_some())
            .finish()
    }
}

impl BsdeProblem {
    pub fn builder(name: impl Into<String>, dim: usize, horizon: f64, x0: Vec<f64>) -> ProblemBuilder {
        ProblemBuilder {
            name: name.into(),
            dim,
            horizon,
            x0,
            drift: None,
            diffusion: None,
            generator: None,
            terminal: None,
            terminal_grad: None,
            exact: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    #[inline]
    pub fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    pub fn has_terminal_grad(&self) -> bool {
        self.terminal_grad.is_some()
    }

    /// Writes `∇g(x)`; returns `false` when the problem has no analytic terminal gradient.
    pub fn terminal_grad(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.terminal_grad {
            Some(g) => {
                g(x, out);
                true
            }
            None => false,
        }
    }

    pub fn exact(&self) -> Option<&ExactSolution> {
        self.exact.as_ref()
    }

    pub fn exact_u(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.exact.as_ref().map(|e| (e.u)(t, x))
    }

    pub fn exact_grad_u(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        self.exact.as_ref().map(|e| {
            let mut g = vec![0.0; self.dim];
            (e.grad_u)(t, x, &mut g);
            g
        })
    }

    /// `Z = σ(t,x)ᵀ ∇u(t,x)` from the closed-form solution.
    pub fn exact_z(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        let grad = self.exact_grad_u(t, x)?;
        let d = self.dim;
        let mut sigma = vec![0.0; d * d];
        self.diffusion.eval(t, x, &mut sigma);
        let mut z = vec![0.0; d];
        sigma_transpose_times(&sigma, &grad, &mut z);
        Some(z)
    }

    /// Checks `u(T, x) = g(x)` on `n` random points around `x0`.
    pub fn check_terminal_consistency(&self, n: usize, seed: u64, tol: f64) -> Result<f64> {
        let exact = self.exact.as_ref().ok_or(Error::MissingExact("terminal consistency"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut x = vec![0.0; self.dim];
        for _ in 0..n {
            for (xi, x0) in x.iter_mut().zip(&self.x0) {
                *xi = x0 + rng.random_range(-3.0..3.0);
            }
            worst = worst.max(((exact.u)(self.horizon, &x) - self.terminal(&x)).abs());
        }
        if worst > tol {
            return Err(contract(format!("exact_u(T, ·) differs from g by {worst:e}")));
        }
        Ok(worst)
    }
}

/// `out = σᵀ v` for a row-major `d×d` matrix `σ`.
#[inline]
pub fn sigma_transpose_times(sigma: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..d {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        let row = &sigma[i * d..(i + 1) * d];
        for (o, s) in out.iter_mut().zip(row) {
            *o += s * vi;
        }
    }
}

/// `out = σ v` for a row-major `d×d` matrix `σ`.
#[inline]
pub fn sigma_times(sigma: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = sigma[i * d..(i + 1) * d].iter().zip(v).map(|(s, w)| s * w).sum();
    }
}

pub struct ProblemBuilder {
    name: String,
    dim: usize,
    horizon: f64,
    x0: Vec<f64>,
    drift: Option<Drift>,
    diffusion: Option<Diffusion>,
    generator: Option<Generator>,
    terminal: Option<TerminalFn>,
    terminal_grad: Option<TerminalGradFn>,
    exact: Option<ExactSolution>,
}

impl ProblemBuilder {
    pub fn drift(mut self, drift: Drift) -> Self {
        self.drift = Some(drift);
        self
    }

    pub fn constant_drift(self, b: Vec<f64>) -> Self {
        self.drift(Drift::Constant(b))
    }

    pub fn diffusion(mut self, diffusion: Diffusion) -> Self {
        self.diffusion = Some(diffusion);
        self
    }

    /// `σ = s·I_d`.
    pub fn scaled_identity_diffusion(self, s: f64) -> Self {
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = s;
        }
        self.diffusion(Diffusion::Constant(m))
    }

    pub fn generator(mut self, generator: Generator) -> Self {
        self.generator = Some(generator);
        self
    }

    pub fn terminal(mut self, g: TerminalFn) -> Self {
        self.terminal = Some(g);
        self
    }

    pub fn terminal_grad(mut self, grad_g: TerminalGradFn) -> Self {
        self.terminal_grad = Some(grad_g);
        self
    }

    pub fn exact(mut self, u: ScalarField, grad_u: VectorField) -> Self {
        self.exact = Some(ExactSolution { u, grad_u });
        self
    }

    pub fn build(self) -> Result<BsdeProblem> {
        let d = self.dim;
        if d == 0 {
            return Err(contract("problem dimension must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(contract(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.x0.len() != d || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(contract("x0 must be a finite vector of length d"));
        }
        let drift = self.drift.unwrap_or(Drift::Constant(vec![0.0; d]));
        if let Drift::Constant(b) = &drift {
            if b.len() != d {
                return Err(contract("constant drift must have length d"));
            }
        }
        let diffusion = self.diffusion.unwrap_or(Diffusion::Constant(vec![0.0; d * d]));
        let mut sigma = vec![0.0; d * d];
        diffusion.eval(0.0, &self.x0, &mut sigma);
        if let Diffusion::Constant(m) = &diffusion {
            if m.len() != d * d {
                return Err(contract("constant diffusion must have d*d entries"));
            }
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(contract("diffusion is not finite at x0"));
        }
        let terminal = self.terminal.ok_or_else(|| contract("terminal function g is required"))?;
        Ok(BsdeProblem {
            name: self.name,
            dim: d,
            horizon: self.horizon,
            x0: self.x0,
            drift,
            diffusion,
            generator: self.generator.unwrap_or_else(Generator::zero),
            terminal,
            terminal_grad: self.terminal_grad,
            exact: self.exact,
        })
    }
}

/// Parameters of the bounded benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedParams {
    pub dim: usize,
    pub horizon: f64,
    pub mu: f64,
    pub sigma: f64,
    pub x0: Vec<f64>,
}

impl BoundedParams {
    /// `μ = 0.2/d`, `σ = 1/√d`, `x0 = 1_d`. At `d = 1` these are `μ = 0.2`, `σ = 1`.
    pub fn new(dim: usize, horizon: f64) -> Self {
        let df = dim.max(1) as f64;
        Self { dim, horizon, mu: 0.2 / df, sigma: 1.0 / df.sqrt(), x0: vec![1.0; dim] }
    }
}

/// Bounded benchmark: `dX = μ 1_d dt + σ dW`, `g(x) = cos(x̄)`,
/// `u(t, x) = e^{(T-t)/2} cos(x̄)` with `x̄ = Σ x_i`.
///
/// The generator is
/// `f = e^{(T-t)/2}(κ cos x̄ + μd sin x̄) − ½(sin x̄ cos x̄ e^{T-t})² + ½(y z̄ / (σd))²`
/// with `κ = (1 + σ²d)/2` and `z̄ = Σ z_i`, which makes `u` an exact solution
/// for every `(d, μ, σ)`. At `d = 1, μ = 0.2, σ = 1` it reduces to
/// `(cos x̄ + 0.2 sin x̄)e^{(T-t)/2} − ½(sin x̄ cos x̄ e^{T-t})² + ½(y z̄)²`.
pub fn bounded_example(params: &BoundedParams) -> Result<BsdeProblem> {
    let BoundedParams { dim: d, horizon: t_end, mu, sigma, .. } = *params;
    let df = d as f64;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(contract(format!("bounded example needs σ > 0, got {sigma}")));
    }
    let kappa = 0.5 * (1.0 + sigma * sigma * df);
    let inv_sd = 1.0 / (sigma * df);
    let value: GeneratorFn = Arc::new(move |t, x, y, z| {
        let xb: f64 = x.iter().sum();
        let zb: f64 = z.iter().sum();
        let (s, c) = xb.sin_cos();
        let e = ((t_end - t) / 2.0).exp();
        let q = s * c * (t_end - t).exp();
        let w = y * zb * inv_sd;
        e * (kappa * c + mu * df * s) - 0.5 * q * q + 0.5 * w * w
    });
    let partials: GeneratorPartialsFn = Arc::new(move |_, _, y, z, dz| {
        let zs = z.iter().sum::<f64>() * inv_sd;
        dz.iter_mut().for_each(|v| *v = y * y * zs * inv_sd);
        y * zs * zs
    });
    BsdeProblem::builder("bounded", d, t_end, params.x0.clone())
        .constant_drift(vec![mu; d])
        .scaled_identity_diffusion(sigma)
        .generator(Generator::with_partials(value, partials))
        .terminal(Arc::new(|x| x.iter().sum::<f64>().cos()))
        .terminal_grad(Arc::new(|x, out| {
            let s = x.iter().sum::<f64>().sin();
            out.iter_mut().for_each(|v| *v = -s);
        }))
        .exact(
            Arc::new(move |t, x| ((t_end - t) / 2.0).exp() * x.iter().sum::<f64>().cos()),
            Arc::new(move |t, x, out| {
                let g = -((t_end - t) / 2.0).exp() * x.iter().sum::<f64>().sin();
                out.iter_mut().for_each(|v| *v = g);
            }),
        )
        .build()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnboundedParams {
    pub dim: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
}

impl UnboundedParams {
    /// `x0 = 0.5·1_d`.
    pub fn new(dim: usize, horizon: f64) -> Self {
        Self { dim, horizon, x0: vec![0.5; dim] }
    }
}

/// `s(x) = sin x` for `x < 0`, `x` otherwise, with its first two derivatives.
#[inline]
fn kinked(x: f64) -> (f64, f64, f64) {
    if x < 0.0 {
        (x.sin(), x.cos(), -x.sin())
    } else {
        (x, 1.0, 0.0)
    }
}

/// Weighted phase `Σ_i i·x_i` (1-based weights).
#[inline]
fn phase(x: &[f64]) -> f64 {
    x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum()
}

fn unbounded_u(t_end: f64, t: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    (t_end - t) / d * x.iter().map(|&v| kinked(v).0).sum::<f64>() + phase(x).cos()
}

fn unbounded_grad(t_end: f64, t: f64, x: &[f64], out: &mut [f64]) {
    let d = x.len() as f64;
    let sp = phase(x).sin();
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = (t_end - t) / d * kinked(v).1 - (j + 1) as f64 * sp;
    }
}

/// Source term `k(t, x)` chosen so that `u` solves the PDE with
/// `b = 0`, `σ = I/√d`, `f = k + (y/√d)(1·z) + y²/2`:
///
/// `k = -∂_t u - Δu/(2d) - (u/d) Σ_j ∂_j u - u²/2`.
fn unbounded_source(t_end: f64, t: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let mut sum_s = 0.0;
    let mut sum_s1 = 0.0;
    let mut sum_s2 = 0.0;
    for &v in x {
        let (s, s1, s2) = kinked(v);
        sum_s += s;
        sum_s1 += s1;
        sum_s2 += s2;
    }
    let ph = phase(x);
    let (sp, cp) = ph.sin_cos();
    let tau = t_end - t;
    let u = tau / d * sum_s + cp;
    let u_t = -sum_s / d;
    let weights: f64 = (1..=x.len()).map(|i| i as f64).sum();
    let weights_sq: f64 = (1..=x.len()).map(|i| (i * i) as f64).sum();
    let grad_sum = tau / d * sum_s1 - weights * sp;
    let lap = tau / d * sum_s2 - weights_sq * cp;
    -u_t - lap / (2.0 * d) - u / d * grad_sum - 0.5 * u * u
}

/// Unbounded benchmark with `u(t,x) = ((T-t)/d) Σ s(x_i) + cos(Σ i·x_i)`.
pub fn unbounded_example(params: &UnboundedParams) -> Result<BsdeProblem> {
    let UnboundedParams { dim: d, horizon: t_end, .. } = *params;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let value: GeneratorFn = Arc::new(move |t, x, y, z| {
        unbounded_source(t_end, t, x) + y * inv_sqrt_d * z.iter().sum::<f64>() + 0.5 * y * y
    });
    let partials: GeneratorPartialsFn = Arc::new(move |_, _, y, z, dz| {
        dz.iter_mut().for_each(|v| *v = y * inv_sqrt_d);
        inv_sqrt_d * z.iter().sum::<f64>() + y
    });
    BsdeProblem::builder("unbounded", d, t_end, params.x0.clone())
        .constant_drift(vec![0.0; d])
        .scaled_identity_diffusion(inv_sqrt_d)
        .generator(Generator::with_partials(value, partials))
        .terminal(Arc::new(|x| phase(x).cos()))
        .terminal_grad(Arc::new(|x, out| {
            let sp = phase(x).sin();
            for (j, o) in out.iter_mut().enumerate() {
                *o = -((j + 1) as f64) * sp;
            }
        }))
        .exact(
            Arc::new(move |t, x| unbounded_u(t_end, t, x)),
            Arc::new(move |t, x, out| unbounded_grad(t_end, t, x, out)),
        )
        .build()
}

/// Heat-type test problem `dX = μ 1_d dt + s dW`, `f ≡ 0`, `g(x) = cos(x̄)`, with
/// `u(t,x) = e^{-s²d(T-t)/2} cos(x̄ + μd(T-t))`.
///
/// With `μ = 0`, `s = 1`, `d = 1` this is the heat-equation problem whose
/// conditional expectations have a Gauss–Hermite reference.
pub fn cosine_heat(dim: usize, horizon: f64, mu: f64, s: f64, x0: Vec<f64>) -> Result<BsdeProblem> {
    let df = dim as f64;
    let decay = 0.5 * s * s * df;
    let shift = mu * df;
    BsdeProblem::builder("cosine", dim, horizon, x0)
        .constant_drift(vec![mu; dim])
        .scaled_identity_diffusion(s)
        .generator(Generator::zero())
        .terminal(Arc::new(|x| x.iter().sum::<f64>().cos()))
        .terminal_grad(Arc::new(|x, out| {
            let v = -x.iter().sum::<f64>().sin();
            out.iter_mut().for_each(|o| *o = v);
        }))
        .exact(
            Arc::new(move |t, x| (-decay * (horizon - t)).exp() * (x.iter().sum::<f64>() + shift * (horizon - t)).cos()),
            Arc::new(move |t, x, out| {
                let v = -(-decay * (horizon - t)).exp() * (x.iter().sum::<f64>() + shift * (horizon - t)).sin();
                out.iter_mut().for_each(|o| *o = v);
            }),
        )
        .build()
}

/// Arithmetic Brownian motion with `g(x) = Σ x_i` and `f ≡ 0`: `u(t,x) = Σ x_i + μd(T-t)`.
pub fn linear_terminal(dim: usize, horizon: f64, mu: f64, s: f64, x0: Vec<f64>) -> Result<BsdeProblem> {
    let shift = mu * dim as f64;
    BsdeProblem::builder("linear", dim, horizon, x0)
        .constant_drift(vec![mu; dim])
        .scaled_identity_diffusion(s)
        .generator(Generator::zero())
        .terminal(Arc::new(|x| x.iter().sum()))
        .terminal_grad(Arc::new(|_, out| out.iter_mut().for_each(|o| *o = 1.0)))
        .exact(
            Arc::new(move |t, x| x.iter().sum::<f64>() + shift * (horizon - t)),
            Arc::new(|_, _, out| out.iter_mut().for_each(|o| *o = 1.0)),
        )
        .build()
}

/// Finite-difference value of the PDE left-hand side at `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeResidual {
    pub value: f64,
}

/// Evaluates `∂_t u + b·∇u + ½ Σ (σσᵀ)_{ij} ∂_{ij} u + f(t, x, u, (∇u)σ)` on the
/// closed-form `u` with central differences of step `h`.
pub fn pde_residual(problem: &BsdeProblem, t: f64, x: &[f64], h: f64) -> Result<PdeResidual> {
    let exact = problem.exact().ok_or(Error::MissingExact("pde residual"))?;
    if !(h > 0.0) {
        return Err(contract("finite-difference step must be positive"));
    }
    if x.len() != problem.dim() {
        return Err(contract("point has wrong dimension"));
    }
    let d = problem.dim();
    let u = |tt: f64, xx: &[f64]| (exact.u)(tt, xx);
    let u0 = u(t, x);
    let u_t = (u(t + h, x) - u(t - h, x)) / (2.0 * h);

    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut xp = x.to_vec();
    for i in 0..d {
        xp[i] = x[i] + h;
        let up = u(t, &xp);
        xp[i] = x[i] - h;
        let um = u(t, &xp);
        xp[i] = x[i];
        grad[i] = (up - um) / (2.0 * h);
        hess[i * d + i] = (up - 2.0 * u0 + um) / (h * h);
        for j in 0..i {
            let mut at = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h;
                xp[j] = x[j] + sj * h;
                let v = u(t, &xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h);
            hess[i * d + j] = v;
            hess[j * d + i] = v;
        }
    }

    let mut b = vec![0.0; d];
    problem.drift().eval(t, x, &mut b);
    let mut sigma = vec![0.0; d * d];
    problem.diffusion().eval(t, x, &mut sigma);

    let transport: f64 = b.iter().zip(&grad).map(|(bi, gi)| bi * gi).sum();
    let mut diffusion = 0.0;
    for i in 0..d {
        for j in 0..d {
            let a_ij: f64 = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
            diffusion += a_ij * hess[i * d + j];
        }
    }
    let mut z = vec![0.0; d];
    sigma_transpose_times(&sigma, &grad, &mut z);
    let f = problem.generator().eval(t, x, u0, &z);
    Ok(PdeResidual { value: u_t + transport + 0.5 * diffusion + f })
}

/// Largest observed difference quotient of `f` in `(y, z)` over random pairs near the
/// closed-form solution. A diagnostic only; the bounded benchmark is not globally Lipschitz.
pub fn lipschitz_probe(problem: &BsdeProblem, n: usize, seed: u64) -> f64 {
    let d = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut x = vec![0.0; d];
    let mut z1 = vec![0.0; d];
    let mut z2 = vec![0.0; d];
    for _ in 0..n {
        let t = rng.random_range(0.0..problem.horizon());
        for (xi, x0) in x.iter_mut().zip(problem.x0()) {
            *xi = x0 + rng.random_range(-2.0..2.0);
        }
        let y1: f64 = rng.random_range(-2.0..2.0);
        let y2: f64 = rng.random_range(-2.0..2.0);
        z1.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        z2.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        let num = (problem.generator().eval(t, &x, y1, &z1) - problem.generator().eval(t, &x, y2, &z2)).abs();
        let den = (y1 - y2).abs() + z1.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if den > 1e-9 {
            worst = worst.max(num / den);
        }
    }
    worst
}
