//! One-hidden-layer feed-forward networks.
//!
//! A [`ShallowNet`] computes `x ↦ c·ρ(a·x + b) + b0` with `a: m×d`, `b: m`,
//! `c: d1×m`, `b0: d1`. Because the architecture is fixed, every derivative the
//! solvers need is written out in closed form instead of going through a
//! general computation graph:
//!
//! - input Jacobian `D_x U = Σ_i c_i ρ'(a_i·x + b_i) a_i`,
//! - parameter gradient (reverse-mode accumulation with an upstream cotangent),
//! - the mixed derivative `∂_θ (w · D_x U)` used when the loss itself contains
//!   the input gradient of the network being trained.
//!
//! Parameters live in one flat buffer laid out as `[a | b | c | b0]`, so
//! optimizers and finite-difference checks can treat a net as a plain vector.
//!
//! Shape errors on the checked entry points (`forward`, `grad_input`,
//! `grad_params`) are reported as [`Error::Contract`]; the `*_into` and
//! `accumulate_*` hot-path variants assert instead.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// `max(0, x)` with the subgradient convention `ρ'(0) = 0`.
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// `(ρ(x), ρ'(x))` with a single transcendental call.
    #[inline]
    pub fn value_deriv(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
        }
    }

    #[inline]
    pub fn second_deriv(self, x: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    /// `sup |ρ'|` over the real line.
    pub fn sup_deriv(self) -> f64 {
        1.0
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Weight-constrained class: `max_i |a_i|₂ ≤ γ` and `Σ_i |c_i| ≤ γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightConstraint {
    gamma: f64,
}

impl WeightConstraint {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(contract(format!("constraint gamma must be positive and finite, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Gradient of a scalar loss with respect to the parameters of a [`ShallowNet`].
///
/// Same flat layout as [`ShallowNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient(Vec<f64>);

impl ParamGradient {
    pub fn zeros_like(net: &ShallowNet) -> Self {
        Self(vec![0.0; net.param_count()])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShallowNet {
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    activation: Activation,
    params: Vec<f64>,
}

impl ShallowNet {
    /// All parameters zero.
    pub fn zeros(input_dim: usize, hidden: usize, output_dim: usize, activation: Activation) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 {
            return Err(contract(format!(
                "network dimensions must be positive (d={input_dim}, m={hidden}, d1={output_dim})"
            )));
        }
        let n = input_dim * hidden + hidden + hidden * output_dim + output_dim;
        Ok(Self { input_dim, hidden, output_dim, activation, params: vec![0.0; n] })
    }

    /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Self::zeros(input_dim, hidden, output_dim, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner_limit = (6.0 / (input_dim + hidden) as f64).sqrt();
        let outer_limit = (6.0 / (hidden + output_dim) as f64).sqrt();
        let inner = Uniform::new_inclusive(-inner_limit, inner_limit).expect("finite bounds");
        let outer = Uniform::new_inclusive(-outer_limit, outer_limit).expect("finite bounds");
        for w in net.inner_weights_mut() {
            *w = inner.sample(&mut rng);
        }
        for w in net.outer_weights_mut() {
            *w = outer.sample(&mut rng);
        }
        Ok(net)
    }

    /// Builds a net from explicit parameter blocks (`a` row-major `m×d`, `c` row-major `d1×m`).
    pub fn from_parts(
        inner_weights: &[f64],
        inner_bias: &[f64],
        outer_weights: &[f64],
        outer_bias: &[f64],
        activation: Activation,
    ) -> Result<Self> {
        let hidden = inner_bias.len();
        let output_dim = outer_bias.len();
        if hidden == 0 || output_dim == 0 || inner_weights.len() % hidden != 0 {
            return Err(contract("inconsistent parameter block sizes"));
        }
        let input_dim = inner_weights.len() / hidden;
        if outer_weights.len() != hidden * output_dim {
            return Err(contract("outer weights must have d1*m entries"));
        }
        let mut net = Self::zeros(input_dim, hidden, output_dim, activation)?;
        net.inner_weights_mut().copy_from_slice(inner_weights);
        net.inner_bias_mut().copy_from_slice(inner_bias);
        net.outer_weights_mut().copy_from_slice(outer_weights);
        net.outer_bias_mut().copy_from_slice(outer_bias);
        if !net.is_finite() {
            return Err(contract("parameters must be finite"));
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    #[inline]
    fn b_off(&self) -> usize {
        self.input_dim * self.hidden
    }

    #[inline]
    fn c_off(&self) -> usize {
        self.b_off() + self.hidden
    }

    #[inline]
    fn b0_off(&self) -> usize {
        self.c_off() + self.hidden * self.output_dim
    }

    pub fn inner_weights(&self) -> &[f64] {
        &self.params[..self.b_off()]
    }

    pub fn inner_bias(&self) -> &[f64] {
        &self.params[self.b_off()..self.c_off()]
    }

    pub fn outer_weights(&self) -> &[f64] {
        &self.params[self.c_off()..self.b0_off()]
    }

    pub fn outer_bias(&self) -> &[f64] {
        &self.params[self.b0_off()..]
    }

    pub fn inner_weights_mut(&mut self) -> &mut [f64] {
        let e = self.b_off();
        &mut self.params[..e]
    }

    pub fn inner_bias_mut(&mut self) -> &mut [f64] {
        let (s, e) = (self.b_off(), self.c_off());
        &mut self.params[s..e]
    }

    pub fn outer_weights_mut(&mut self) -> &mut [f64] {
        let (s, e) = (self.c_off(), self.b0_off());
        &mut self.params[s..e]
    }

    pub fn outer_bias_mut(&mut self) -> &mut [f64] {
        let s = self.b0_off();
        &mut self.params[s..]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(contract(format!("input has length {}, network expects {}", x.len(), self.input_dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(contract("input contains non-finite entries"));
        }
        Ok(())
    }

    #[inline]
    fn preactivation(&self, x: &[f64], i: usize) -> f64 {
        let d = self.input_dim;
        let row = &self.params[i * d..(i + 1) * d];
        let mut s = self.params[self.b_off() + i];
        for (w, xv) in row.iter().zip(x) {
            s += w * xv;
        }
        s
    }

    /// `c·ρ(a·x+b) + b0`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut out = vec![0.0; self.output_dim];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.input_dim, "input length mismatch");
        assert_eq!(out.len(), self.output_dim, "output length mismatch");
        let m = self.hidden;
        let c_off = self.c_off();
        out.copy_from_slice(self.outer_bias());
        for i in 0..m {
            let h = self.activation.value(self.preactivation(x, i));
            for (k, o) in out.iter_mut().enumerate() {
                *o += self.params[c_off + k * m + i] * h;
            }
        }
    }

    /// Scalar output of a `d1 = 1` network.
    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(self.output_dim, 1);
        debug_assert_eq!(x.len(), self.input_dim);
        let c_off = self.c_off();
        let mut v = self.params[self.b0_off()];
        for i in 0..self.hidden {
            v += self.params[c_off + i] * self.activation.value(self.preactivation(x, i));
        }
        v
    }

    /// Value and input gradient of a scalar network in one pass.
    #[inline]
    pub fn value_and_grad_input(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(self.output_dim, 1);
        debug_assert_eq!(grad.len(), self.input_dim);
        let d = self.input_dim;
        let c_off = self.c_off();
        let mut v = self.params[self.b0_off()];
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..self.hidden {
            let s = self.preactivation(x, i);
            let c = self.params[c_off + i];
            let (h, hp) = self.activation.value_deriv(s);
            v += c * h;
            let scale = c * hp;
            if scale != 0.0 {
                for (g, a) in grad.iter_mut().zip(&self.params[i * d..(i + 1) * d]) {
                    *g += scale * a;
                }
            }
        }
        v
    }

    /// Jacobian `∂ output / ∂ x`, row-major `d1×d`.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (d, m, d1) = (self.input_dim, self.hidden, self.output_dim);
        let c_off = self.c_off();
        let mut jac = vec![0.0; d1 * d];
        for i in 0..m {
            let rho_p = self.activation.deriv(self.preactivation(x, i));
            if rho_p == 0.0 {
                continue;
            }
            let row = &self.params[i * d..(i + 1) * d];
            for k in 0..d1 {
                let scale = self.params[c_off + k * m + i] * rho_p;
                for (j, a) in row.iter().enumerate() {
                    jac[k * d + j] += scale * a;
                }
            }
        }
        Ok(jac)
    }

    /// Reverse-mode gradient of `upstream · output` with respect to the parameters.
    pub fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Result<ParamGradient> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim {
            return Err(contract(format!(
                "upstream has length {}, network output is {}",
                upstream.len(),
                self.output_dim
            )));
        }
        let mut g = ParamGradient::zeros_like(self);
        self.accumulate_grad_params(x, upstream, 1.0, &mut g);
        Ok(g)
    }

    /// `grad += scale · ∂(upstream · U(x)) / ∂θ`.
    pub fn accumulate_grad_params(&self, x: &[f64], upstream: &[f64], scale: f64, grad: &mut ParamGradient) {
        assert_eq!(x.len(), self.input_dim);
        assert_eq!(upstream.len(), self.output_dim);
        assert_eq!(grad.len(), self.param_count());
        let (d, m) = (self.input_dim, self.hidden);
        let (b_off, c_off, b0_off) = (self.b_off(), self.c_off(), self.b0_off());
        let g = grad.as_mut_slice();
        for (k, u) in upstream.iter().enumerate() {
            g[b0_off + k] += scale * u;
        }
        for i in 0..m {
            let (h, hp) = self.activation.value_deriv(self.preactivation(x, i));
            let mut back = 0.0;
            for (k, u) in upstream.iter().enumerate() {
                g[c_off + k * m + i] += scale * u * h;
                back += u * self.params[c_off + k * m + i];
            }
            let delta = scale * back * hp;
            if delta != 0.0 {
                g[b_off + i] += delta;
                for (gj, xj) in g[i * d..(i + 1) * d].iter_mut().zip(x) {
                    *gj += delta * xj;
                }
            }
        }
    }

    /// Scalar-output shortcut: `grad += scale · ∂U(x)/∂θ`.
    #[inline]
    pub fn accumulate_scalar_grad(&self, x: &[f64], scale: f64, grad: &mut ParamGradient) {
        debug_assert_eq!(self.output_dim, 1);
        self.accumulate_grad_params(x, &[1.0], scale, grad);
    }

    /// `grad += scale · ∂(w · D_x U(x)) / ∂θ` for a scalar network.
    ///
    /// With `s_i = a_i·x + b_i` and `w·D_xU = Σ_i c_i ρ'(s_i)(a_i·w)`:
    /// `∂/∂c_i = ρ'(s_i)(a_i·w)`, `∂/∂b_i = c_i ρ''(s_i)(a_i·w)`,
    /// `∂/∂a_i = c_i(ρ''(s_i)(a_i·w) x + ρ'(s_i) w)`, `∂/∂b0 = 0`.
    pub fn accumulate_mixed_grad(&self, x: &[f64], w: &[f64], scale: f64, grad: &mut ParamGradient) {
        assert_eq!(self.output_dim, 1, "mixed gradient is defined for scalar networks");
        assert_eq!(x.len(), self.input_dim);
        assert_eq!(w.len(), self.input_dim);
        assert_eq!(grad.len(), self.param_count());
        let d = self.input_dim;
        let (b_off, c_off) = (self.b_off(), self.c_off());
        let g = grad.as_mut_slice();
        for i in 0..self.hidden {
            let s = self.preactivation(x, i);
            let row = &self.params[i * d..(i + 1) * d];
            let aw: f64 = row.iter().zip(w).map(|(a, wv)| a * wv).sum();
            let c = self.params[c_off + i];
            let (r1, r2) = match self.activation {
                Activation::Tanh => {
                    let t = s.tanh();
                    (1.0 - t * t, -2.0 * t * (1.0 - t * t))
                }
                a => (a.deriv(s), a.second_deriv(s)),
            };
            g[c_off + i] += scale * r1 * aw;
            g[b_off + i] += scale * c * r2 * aw;
            let cx = scale * c * r2 * aw;
            let cw = scale * c * r1;
            for j in 0..d {
                g[i * d + j] += cx * x[j] + cw * w[j];
            }
        }
    }

    /// Projection onto the weight-constrained class.
    ///
    /// Rows with `|a_i|₂ > γ` are rescaled onto the sphere of radius γ; if
    /// `Σ|c_i| > γ` all outer weights are scaled by `γ / Σ|c_i|`. Feasible
    /// networks are returned bit-for-bit unchanged.
    pub fn project_weights(&self, constraint: &WeightConstraint) -> Result<ShallowNet> {
        if self.output_dim != 1 {
            return Err(contract("weight projection requires a scalar-output network"));
        }
        let gamma = constraint.gamma();
        let mut out = self.clone();
        let d = self.input_dim;
        for row in out.inner_weights_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > gamma {
                let s = gamma / norm;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        let l1: f64 = out.outer_weights().iter().map(|v| v.abs()).sum();
        if l1 > gamma {
            let s = gamma / l1;
            out.outer_weights_mut().iter_mut().for_each(|v| *v *= s);
        }
        Ok(out)
    }

    /// `max_i |a_i|₂`.
    pub fn max_inner_row_norm(&self) -> f64 {
        self.inner_weights()
            .chunks(self.input_dim)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `Σ |c_i|` over all outer weights.
    pub fn outer_l1(&self) -> f64 {
        self.outer_weights().iter().map(|v| v.abs()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn abs_net() -> ShallowNet {
        ShallowNet::from_parts(&[1.0, -1.0], &[0.0, 0.0], &[1.0, 1.0], &[0.0], Activation::Relu).unwrap()
    }

    fn random_net(d: usize, m: usize, d1: usize, seed: u64) -> ShallowNet {
        let mut net = ShallowNet::init(d, m, d1, Activation::Tanh, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        for p in net.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        net
    }

    #[test]
    fn constant_network_returns_bias() {
        let mut net = ShallowNet::zeros(3, 4, 1, Activation::Tanh).unwrap();
        net.outer_bias_mut()[0] = 0.7;
        assert_eq!(net.forward(&[0.3, -2.0, 5.0]).unwrap(), vec![0.7]);
        assert!(net.grad_input(&[0.3, -2.0, 5.0]).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_tanh_neuron_at_origin() {
        let net = ShallowNet::from_parts(&[1.0], &[0.0], &[1.0], &[0.0], Activation::Tanh).unwrap();
        assert_eq!(net.forward(&[0.0]).unwrap(), vec![0.0]);
        assert_eq!(net.grad_input(&[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn two_relu_neurons_give_absolute_value() {
        assert_eq!(abs_net().forward(&[-2.0]).unwrap(), vec![2.0]);
        assert_eq!(abs_net().forward(&[3.5]).unwrap(), vec![3.5]);
        // ρ'(0) = 0 on both neurons
        assert_eq!(abs_net().grad_input(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let net = abs_net();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Contract(_))));
        assert!(matches!(net.grad_input(&[]), Err(Error::Contract(_))));
        assert!(matches!(net.grad_params(&[1.0], &[1.0, 1.0]), Err(Error::Contract(_))));
        assert!(net.forward(&[f64::NAN]).is_err());
    }

    #[test]
    fn parameter_count_matches_layout() {
        let net = ShallowNet::zeros(5, 7, 3, Activation::Relu).unwrap();
        assert_eq!(net.param_count(), 5 * 7 + 7 + 7 * 3 + 3);
        assert!(ShallowNet::zeros(0, 1, 1, Activation::Relu).is_err());
    }

    #[test]
    fn grad_input_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..100 {
            let net = random_net(3, 6, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let jac = net.grad_input(&x).unwrap();
            for j in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fp = net.forward(&xp).unwrap();
                let fm = net.forward(&xm).unwrap();
                for k in 0..2 {
                    let fd = (fp[k] - fm[k]) / (2.0 * h);
                    assert!((jac[k * 3 + j] - fd).abs() < 1e-6, "seed {seed} k {k} j {j}");
                }
            }
        }
    }

    #[test]
    fn grad_params_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..100 {
            let net = random_net(2, 5, 1, seed);
            let x = [0.4 - seed as f64 * 0.01, -0.9];
            let g = net.grad_params(&x, &[1.0]).unwrap();
            for p in 0..net.param_count() {
                let mut np = net.clone();
                let mut nm = net.clone();
                np.params_mut()[p] += h;
                nm.params_mut()[p] -= h;
                let fd = (np.value(&x) - nm.value(&x)) / (2.0 * h);
                assert!((g.as_slice()[p] - fd).abs() < 1e-6, "seed {seed} param {p}");
            }
        }
    }

    #[test]
    fn output_bias_gradient_is_upstream() {
        let net = random_net(2, 3, 3, 4);
        let up = [0.3, -1.2, 2.5];
        let g = net.grad_params(&[0.1, 0.2], &up).unwrap();
        assert_eq!(&g.as_slice()[net.param_count() - 3..], &up);
        let zero = net.grad_params(&[0.1, 0.2], &[0.0; 3]).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_gradient_matches_finite_differences_of_directional_derivative() {
        let h = 1e-5;
        let net = random_net(3, 4, 1, 11);
        let x = [0.2, -0.5, 0.8];
        let w = [1.5, -0.3, 0.7];
        let dir = |n: &ShallowNet| -> f64 {
            let jac = n.grad_input(&x).unwrap();
            jac.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut g = ParamGradient::zeros_like(&net);
        net.accumulate_mixed_grad(&x, &w, 1.0, &mut g);
        for p in 0..net.param_count() {
            let mut np = net.clone();
            let mut nm = net.clone();
            np.params_mut()[p] += h;
            nm.params_mut()[p] -= h;
            let fd = (dir(&np) - dir(&nm)) / (2.0 * h);
            assert!((g.as_slice()[p] - fd).abs() < 1e-7, "param {p}: {} vs {fd}", g.as_slice()[p]);
        }
    }

    #[test]
    fn value_and_grad_input_agree_with_checked_api() {
        let net = random_net(4, 6, 1, 9);
        let x = [0.1, 0.2, -0.3, 0.9];
        let mut g = [0.0; 4];
        let v = net.value_and_grad_input(&x, &mut g);
        assert_eq!(v, net.forward(&x).unwrap()[0]);
        assert_eq!(g.to_vec(), net.grad_input(&x).unwrap());
    }

    #[test]
    fn projection_examples() {
        let net = ShallowNet::from_parts(&[3.0], &[0.1], &[0.5], &[0.0], Activation::Tanh).unwrap();
        let p = net.project_weights(&WeightConstraint::new(1.0).unwrap()).unwrap();
        assert_eq!(p.inner_weights(), &[1.0]);

        let net = ShallowNet::from_parts(&[0.5, 0.5], &[0.0, 0.0], &[2.0, -2.0], &[0.0], Activation::Tanh).unwrap();
        let p = net.project_weights(&WeightConstraint::new(1.0).unwrap()).unwrap();
        assert_eq!(p.outer_weights(), &[0.5, -0.5]);
        assert_eq!(p.outer_l1(), 1.0);

        let feasible = ShallowNet::from_parts(&[0.5, -0.2], &[0.3, 0.1], &[0.4, 0.1], &[2.0], Activation::Tanh).unwrap();
        let p = feasible.project_weights(&WeightConstraint::new(1.0).unwrap()).unwrap();
        assert_eq!(p, feasible);

        assert!(WeightConstraint::new(0.0).is_err());
        assert!(WeightConstraint::new(-1.0).is_err());
        let vector_net = ShallowNet::zeros(1, 2, 2, Activation::Tanh).unwrap();
        assert!(vector_net.project_weights(&WeightConstraint::new(1.0).unwrap()).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let a = ShallowNet::init(3, 13, 1, Activation::Relu, 42).unwrap();
        let b = ShallowNet::init(3, 13, 1, Activation::Relu, 42).unwrap();
        let c = ShallowNet::init(3, 13, 1, Activation::Relu, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.inner_bias().iter().all(|&v| v == 0.0));
        assert!(a.outer_bias().iter().all(|&v| v == 0.0));

        let (d, m) = (4, 20);
        let limit = (6.0 / (d + m) as f64).sqrt();
        let mut worst: f64 = 0.0;
        let mut draws = 0;
        let mut seed = 0;
        while draws < 10_000 {
            let net = ShallowNet::init(d, m, 1, Activation::Tanh, seed).unwrap();
            worst = net.inner_weights().iter().fold(worst, |w, v| w.max(v.abs()));
            draws += net.inner_weights().len();
            seed += 1;
        }
        assert!(worst <= limit);
        assert!(worst > 0.9 * limit);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(seed in 0u64..10_000, gamma in 0.1f64..3.0) {
            let mut net = random_net(3, 5, 1, seed);
            net.params_mut().iter_mut().for_each(|p| *p *= 4.0);
            let c = WeightConstraint::new(gamma).unwrap();
            let once = net.project_weights(&c).unwrap();
            let twice = once.project_weights(&c).unwrap();
            prop_assert!(once.max_inner_row_norm() <= gamma * (1.0 + 1e-12));
            prop_assert!(once.outer_l1() <= gamma * (1.0 + 1e-12));
            for (a, b) in once.params().iter().zip(twice.params()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn grad_params_is_homogeneous_in_upstream(seed in 0u64..10_000, lambda in -5.0f64..5.0) {
            let net = random_net(2, 4, 2, seed);
            let x = [0.3, -0.7];
            let up = [0.9, -0.4];
            let g = net.grad_params(&x, &up).unwrap();
            let gl = net.grad_params(&x, &[lambda * up[0], lambda * up[1]]).unwrap();
            for (a, b) in g.as_slice().iter().zip(gl.as_slice()) {
                prop_assert!((lambda * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
