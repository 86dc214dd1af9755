//! Independent checks: finite-difference gradients, network derivative
//! bounds, a quadrature reference for `f ≡ 0` problems and the `L²`
//! regularity of the exact `Z`.

use std::sync::OnceLock;

use gauss_quad::hermite::GaussHermite;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{contract, Error, Result};
use crate::net::{ShallowNet, WeightConstraint};
use crate::problems::BsdeProblem;
use crate::sde::{simulate_paths, StreamRng, TimeGrid};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub max_abs: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel <= rel_tol
    }
}

/// Compares the gradient returned by `loss` at `params` with central differences
/// of step `step` in every coordinate.
///
/// The relative error of coordinate `k` is `|g_k − fd_k| / max(|g_k|, |fd_k|, 1e-6·max|g|, 1e-12)`,
/// so coordinates whose gradient is negligible next to the largest one are judged on an absolute scale.
pub fn finite_diff_check<F>(mut loss: F, params: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(contract("finite-difference step must be positive"));
    }
    if params.is_empty() {
        return Err(contract("no parameters to check"));
    }
    let (value, grad) = loss(params)?;
    if grad.len() != params.len() {
        return Err(contract("gradient length differs from parameter count"));
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss or gradient at the base point".into()));
    }
    let floor = (1e-6 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()))).max(1e-12);
    let mut probe = params.to_vec();
    let mut report = GradCheckReport { max_rel: 0.0, max_abs: 0.0, worst_index: 0, step };
    for k in 0..params.len() {
        probe[k] = params[k] + step;
        let (up, _) = loss(&probe)?;
        probe[k] = params[k] - step;
        let (down, _) = loss(&probe)?;
        probe[k] = params[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss near coordinate {k}")));
        }
        let fd = (up - down) / (2.0 * step);
        let abs = (grad[k] - fd).abs();
        let rel = abs / grad[k].abs().max(fd.abs()).max(floor);
        report.max_abs = report.max_abs.max(abs);
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst_index = k;
        }
    }
    Ok(report)
}

/// Largest `|D_x U|` found by probing, and whether it respects `γ²·sup|ρ'|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub holds: bool,
    pub worst: f64,
    pub bound: f64,
}

/// Probes `|D_x U(x)|` at each neuron's peak-slope point (`a_i·x + b_i = 0`) and at
/// `n_probes` random points `x ~ N(0, 9 I)`.
pub fn derivative_bound_check(
    net: &ShallowNet,
    constraint: &WeightConstraint,
    n_probes: usize,
    seed: u64,
) -> Result<BoundCheck> {
    if net.output_dim() != 1 {
        return Err(contract("derivative bound applies to scalar networks"));
    }
    let d = net.input_dim();
    let bound = constraint.gamma().powi(2) * net.activation().sup_deriv();
    let mut grad = vec![0.0; d];
    let mut worst = 0.0f64;
    let mut probe = |x: &[f64]| {
        net.value_and_grad_input(x, &mut grad);
        worst = worst.max(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
    };
    let (a, b) = (net.inner_weights(), net.inner_bias());
    for (row, bi) in a.chunks_exact(d).zip(b) {
        let norm2: f64 = row.iter().map(|v| v * v).sum();
        if norm2 > 0.0 {
            let x: Vec<f64> = row.iter().map(|v| -bi * v / norm2).collect();
            probe(&x);
        }
    }
    let mut rng = StreamRng::new(seed).rng();
    let mut x = vec![0.0; d];
    for _ in 0..n_probes {
        x.iter_mut().for_each(|v| *v = 3.0 * rng.sample::<f64, _>(StandardNormal));
        probe(&x);
    }
    // Relative slack for round-off in the chain rule.
    Ok(BoundCheck { holds: worst <= bound * (1.0 + 1e-12), worst, bound })
}

/// Number of Gauss–Hermite nodes used by [`conditional_expectation_oracle`].
pub const HERMITE_NODES: usize = 64;

/// Standard-normal nodes and weights normalised to sum to one.
fn hermite() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let rule = GaussHermite::new(HERMITE_NODES).expect("valid degree");
        let total: f64 = rule.weights().sum();
        rule.nodes().zip(rule.weights()).map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / total)).collect()
    })
}

/// `E[h(ξ)]` for `ξ ~ N(0, 1)`.
pub fn gaussian_expectation(mut h: impl FnMut(f64) -> f64) -> f64 {
    hermite().iter().map(|(x, w)| w * h(*x)).sum()
}

/// `E[g(X_N) | X_i = x]` for a one-dimensional problem with `f ≡ 0` and constant
/// `b`, `σ`, where the Euler transition is Gaussian.
pub fn conditional_expectation_oracle(problem: &BsdeProblem, grid: &TimeGrid, i: usize, x: f64) -> Result<f64> {
    let (b, s) = constant_scalar_coefficients(problem)?;
    if !problem.generator().is_zero() {
        return Err(Error::Unsupported("the quadrature reference needs f ≡ 0".into()));
    }
    if i > grid.n_steps() {
        return Err(contract(format!("step {i} is outside 0..={}", grid.n_steps())));
    }
    let tau = grid.horizon() - grid.time(i);
    let mean = x + b * tau;
    let sd = s * tau.sqrt();
    Ok(gaussian_expectation(|xi| problem.terminal(&[mean + sd * xi])))
}

fn constant_scalar_coefficients(problem: &BsdeProblem) -> Result<(f64, f64)> {
    if problem.dim() != 1 {
        return Err(Error::Unsupported("the quadrature reference is one-dimensional".into()));
    }
    match (problem.drift().constant(), problem.diffusion().constant()) {
        (Some(b), Some(s)) => Ok((b[0], s[0])),
        _ => Err(Error::Unsupported("the quadrature reference needs constant b and σ".into())),
    }
}

/// Interval holding the central `mass` of `X_i` for a one-dimensional problem with
/// constant coefficients. Degenerates to a point at `t = 0`.
pub fn central_range(problem: &BsdeProblem, grid: &TimeGrid, i: usize, mass: f64) -> Result<(f64, f64)> {
    let (b, s) = constant_scalar_coefficients(problem)?;
    if !(0.0 < mass && mass < 1.0) {
        return Err(contract("mass must lie in (0, 1)"));
    }
    let t = grid.time(i);
    let centre = problem.x0()[0] + b * t;
    let half = Normal::standard().inverse_cdf(0.5 + mass / 2.0) * s.abs() * t.sqrt();
    Ok((centre - half, centre + half))
}

/// Sub-intervals per time step used by [`z_regularity_estimate`].
pub const Z_SUBSTEPS: usize = 20;

/// Monte Carlo estimate of `E[Σ_i ∫_{t_i}^{t_{i+1}} |Z_t − Z̄_i|² dt]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZRegularityEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Uses the exact `Z` on a fine Euler path with [`Z_SUBSTEPS`] sub-steps per step;
/// `Z̄_i` is the pathwise average of `Z` over the left sub-points of `[t_i, t_{i+1})`.
pub fn z_regularity_estimate(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    n_paths: usize,
    rng: &StreamRng,
) -> Result<ZRegularityEstimate> {
    if problem.exact().is_none() {
        return Err(Error::MissingExact("Z regularity needs the exact gradient"));
    }
    if n_paths < 2 {
        return Err(contract("at least two paths are needed for a standard error"));
    }
    let n = grid.n_steps();
    let mut times = Vec::with_capacity(n * Z_SUBSTEPS + 1);
    for i in 0..n {
        let (t, dt) = (grid.time(i), grid.dt(i));
        times.extend((0..Z_SUBSTEPS).map(|j| t + dt * j as f64 / Z_SUBSTEPS as f64));
    }
    times.push(grid.horizon());
    let fine = TimeGrid::from_times(times)?;
    let batch = simulate_paths(problem, &fine, n_paths, rng)?;
    let d = problem.dim();
    let mut zs = vec![0.0; Z_SUBSTEPS * d];
    let mut totals = Vec::with_capacity(n_paths);
    for k in 0..n_paths {
        let mut total = 0.0;
        for i in 0..n {
            let weight = grid.dt(i) / Z_SUBSTEPS as f64;
            for j in 0..Z_SUBSTEPS {
                let idx = i * Z_SUBSTEPS + j;
                let z = problem.exact_z(fine.time(idx), batch.state(k, idx)).expect("exact solution present");
                zs[j * d..(j + 1) * d].copy_from_slice(&z);
            }
            for l in 0..d {
                let mean = (0..Z_SUBSTEPS).map(|j| zs[j * d + l]).sum::<f64>() / Z_SUBSTEPS as f64;
                total += weight * (0..Z_SUBSTEPS).map(|j| (zs[j * d + l] - mean).powi(2)).sum::<f64>();
            }
        }
        totals.push(total);
    }
    let mean = totals.iter().sum::<f64>() / n_paths as f64;
    let var = totals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_paths - 1) as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("Z regularity estimate".into()));
    }
    Ok(ZRegularityEstimate { value: mean, std_error: (var / n_paths as f64).sqrt() })
}
