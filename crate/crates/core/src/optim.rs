//! First-order optimizers and the plateau learning-rate schedule.
//!
//! An [`OptimizerState`] can drive several parameter buffers at once (the
//! Deep BSDE scheme trains `N + 1` networks jointly). Each buffer owns a
//! segment of the moment accumulators; [`OptimizerState::step_many`] checks
//! every gradient before touching anything, so a non-finite gradient skips the
//! whole update.

use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::net::{ParamGradient, ShallowNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Sgd,
    Adam,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Method::Sgd),
            "adam" => Ok(Method::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}' (expected sgd or adam)"))),
        }
    }
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Adam => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Iterations at the first trained step.
    pub iterations: usize,
    /// Iterations at every later (warm-started) step.
    pub subsequent_iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Relative improvement that resets the plateau counter.
    pub plateau_tolerance: f64,
    pub plateau_patience: usize,
    pub method: Method,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            subsequent_iterations: 1000,
            batch_size: 1000,
            lr0: 0.01,
            plateau_tolerance: 0.01,
            plateau_patience: 100,
            method: Method::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.iterations == 0 {
            return bad("iterations");
        }
        if self.subsequent_iterations == 0 {
            return bad("subsequent_iterations");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0");
        }
        if !(self.plateau_tolerance > 0.0 && self.plateau_tolerance.is_finite()) {
            return bad("plateau_tolerance");
        }
        if !(self.eps > 0.0) {
            return bad("eps");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        Ok(())
    }

    /// Budget for a step: `iterations` if it is the first one trained, `subsequent_iterations` after.
    pub fn iterations_for(&self, first: bool) -> usize {
        if first {
            self.iterations
        } else {
            self.subsequent_iterations
        }
    }
}

/// Outcome of one parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient contained NaN or ±∞; parameters and moments are untouched.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    method: Method,
    lr0: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    tolerance: f64,
    patience: usize,
    iteration: u64,
    best_loss: Option<f64>,
    plateau_counter: usize,
    halvings: usize,
    skipped: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    segments: Vec<usize>,
}

impl OptimizerState {
    /// State for a single buffer of `n_params` entries.
    pub fn new(config: &TrainConfig, n_params: usize) -> Self {
        Self::with_segments(config, &[n_params])
    }

    /// State for several buffers updated together, with the given lengths.
    pub fn with_segments(config: &TrainConfig, lengths: &[usize]) -> Self {
        let total: usize = lengths.iter().sum();
        let mut segments = Vec::with_capacity(lengths.len() + 1);
        segments.push(0);
        let mut acc = 0;
        for &l in lengths {
            acc += l;
            segments.push(acc);
        }
        let moments = |on: bool| if on { vec![0.0; total] } else { Vec::new() };
        let adam = config.method == Method::Adam;
        Self {
            method: config.method,
            lr0: config.lr0,
            lr: config.lr0,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            tolerance: config.plateau_tolerance,
            patience: config.plateau_patience,
            iteration: 0,
            best_loss: None,
            plateau_counter: 0,
            halvings: 0,
            skipped: 0,
            m: moments(adam),
            v: moments(adam),
            segments,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best_loss
    }

    pub fn plateau_counter(&self) -> usize {
        self.plateau_counter
    }

    pub fn halvings(&self) -> usize {
        self.halvings
    }

    /// Updates skipped because of a non-finite gradient.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One update of a single buffer.
    pub fn step(&mut self, params: &mut [f64], grad: &ParamGradient) -> Result<StepOutcome> {
        self.step_many(&mut [(params, grad.as_slice())])
    }

    pub fn step_net(&mut self, net: &mut ShallowNet, grad: &ParamGradient) -> Result<StepOutcome> {
        self.step(net.params_mut(), grad)
    }

    /// One joint update of all segments. Either every buffer moves or none does.
    pub fn step_many(&mut self, parts: &mut [(&mut [f64], &[f64])]) -> Result<StepOutcome> {
        if parts.len() != self.segments.len() - 1 {
            return Err(contract(format!(
                "optimizer tracks {} buffers, got {}",
                self.segments.len() - 1,
                parts.len()
            )));
        }
        for (s, (p, g)) in parts.iter().enumerate() {
            let len = self.segments[s + 1] - self.segments[s];
            if p.len() != len || g.len() != len {
                return Err(contract(format!(
                    "buffer {s}: expected {len} entries, got params {} / grad {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        if parts.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            self.skipped += 1;
            return Ok(StepOutcome::Skipped);
        }
        self.iteration += 1;
        match self.method {
            Method::Sgd => {
                for (p, g) in parts.iter_mut() {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi -= self.lr * gi;
                    }
                }
            }
            Method::Adam => {
                let t = self.iteration as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (s, (p, g)) in parts.iter_mut().enumerate() {
                    let off = self.segments[s];
                    let m = &mut self.m[off..off + p.len()];
                    let v = &mut self.v[off..off + p.len()];
                    for j in 0..p.len() {
                        let gj = g[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(StepOutcome::Applied)
    }

    /// Feeds one loss observation to the plateau scheduler. Returns `true` if
    /// the learning rate was halved.
    ///
    /// An observation improves on the best loss so far when
    /// `best − loss ≥ tolerance·|best|`; anything else (including the very
    /// first observation) advances the plateau counter, and `patience`
    /// consecutive non-improvements halve the rate.
    pub fn observe_loss(&mut self, loss: f64) -> bool {
        if !loss.is_finite() {
            return false;
        }
        match self.best_loss {
            Some(best) if best - loss >= self.tolerance * best.abs() => {
                self.best_loss = Some(loss);
                self.plateau_counter = 0;
                return false;
            }
            Some(best) => {
                self.best_loss = Some(best.min(loss));
                self.plateau_counter += 1;
            }
            None => {
                self.best_loss = Some(loss);
                self.plateau_counter += 1;
            }
        }
        if self.plateau_counter >= self.patience {
            self.lr *= 0.5;
            self.plateau_counter = 0;
            self.halvings += 1;
            return true;
        }
        false
    }

    /// Zero moments, restore `lr0`, clear counters.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
        self.lr = self.lr0;
        self.iteration = 0;
        self.best_loss = None;
        self.plateau_counter = 0;
        self.halvings = 0;
        self.skipped = 0;
    }
}

/// Initial network for the next (earlier) time step: an independent copy of
/// `source`. Pair it with a fresh or [`reset`](OptimizerState::reset) state.
pub fn warm_start(source: &ShallowNet) -> ShallowNet {
    source.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use proptest::prelude::*;

    fn sgd(lr: f64) -> TrainConfig {
        TrainConfig { method: Method::Sgd, lr0: lr, ..TrainConfig::default() }
    }

    #[test]
    fn default_config_is_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.iterations_for(true), 5000);
        assert_eq!(c.iterations_for(false), 1000);
        assert_eq!(c.method, Method::Adam);
        assert!(TrainConfig { beta1: 1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lr0: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("Adam".parse::<Method>().unwrap(), Method::Adam);
        assert_eq!("sgd".parse::<Method>().unwrap(), Method::Sgd);
        assert!("lbfgs".parse::<Method>().is_err());
    }

    #[test]
    fn sgd_zero_gradient_keeps_parameters() {
        let mut st = OptimizerState::new(&sgd(0.1), 3);
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut p, &ParamGradient::from_vec(vec![0.0; 3])).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn sgd_single_step() {
        let mut st = OptimizerState::new(&sgd(0.1), 1);
        let mut p = vec![1.0];
        st.step(&mut p, &ParamGradient::from_vec(vec![2.0])).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
        assert_eq!(st.iteration(), 1);
    }

    #[test]
    fn adam_constant_gradient() {
        let cfg = TrainConfig { lr0: 1e-3, ..TrainConfig::default() };
        let mut st = OptimizerState::new(&cfg, 1);
        let mut p = vec![0.0];
        let g = ParamGradient::from_vec(vec![1.0]);
        let mut prev = 0.0;
        let mut last_change = 0.0;
        for _ in 0..1000 {
            st.step(&mut p, &g).unwrap();
            assert!(p[0] < prev);
            last_change = prev - p[0];
            prev = p[0];
        }
        // m̂ = 1 and v̂ = 1 exactly under a constant gradient, so every step is lr/(1+ε).
        assert!((last_change - 1e-3).abs() < 1e-10, "{last_change}");
        assert!((p[0] + 1.0).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn non_finite_gradient_is_skipped_atomically() {
        let mut st = OptimizerState::with_segments(&TrainConfig::default(), &[2, 2]);
        let mut a = vec![1.0, 1.0];
        let mut b = vec![2.0, 2.0];
        st.step_many(&mut [(&mut a, &[0.5, 0.5]), (&mut b, &[0.5, 0.5])]).unwrap();
        let (a1, b1, m1, v1) = (a.clone(), b.clone(), st.first_moment().to_vec(), st.second_moment().to_vec());
        let out = st.step_many(&mut [(&mut a, &[0.5, 0.5]), (&mut b, &[f64::NAN, 0.5])]).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!((a.clone(), b.clone()), (a1, b1));
        assert_eq!(st.first_moment(), m1.as_slice());
        assert_eq!(st.second_moment(), v1.as_slice());
        assert_eq!(st.skipped(), 1);
        assert_eq!(st.iteration(), 1);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut st = OptimizerState::new(&TrainConfig::default(), 3);
        let mut p = vec![0.0; 2];
        assert!(matches!(st.step(&mut p, &ParamGradient::from_vec(vec![0.0; 2])), Err(Error::Contract(_))));
    }

    #[test]
    fn improving_losses_keep_lr() {
        let cfg = TrainConfig { plateau_patience: 5, ..TrainConfig::default() };
        let mut st = OptimizerState::new(&cfg, 1);
        let mut loss = 1.0;
        for _ in 0..100 {
            st.observe_loss(loss);
            loss *= 0.9;
        }
        assert_eq!(st.lr(), cfg.lr0);
    }

    #[test]
    fn constant_loss_two_windows_quarters_lr() {
        let cfg = TrainConfig::default();
        let mut st = OptimizerState::new(&cfg, 1);
        for _ in 0..2 * cfg.plateau_patience {
            st.observe_loss(0.5);
        }
        assert_eq!(st.lr(), cfg.lr0 / 4.0);
        assert_eq!(st.halvings(), 2);
    }

    #[test]
    fn boundary_improvement_counts() {
        let cfg = TrainConfig { plateau_patience: 2, plateau_tolerance: 0.5, ..TrainConfig::default() };
        let mut st = OptimizerState::new(&cfg, 1);
        st.observe_loss(1.0);
        assert_eq!(st.plateau_counter(), 1);
        // Exactly a 50% drop: improvement, counter resets.
        st.observe_loss(0.5);
        assert_eq!(st.plateau_counter(), 0);
        // Just short of the threshold: not an improvement.
        st.observe_loss(0.2500001);
        assert_eq!(st.plateau_counter(), 1);
        assert_eq!(st.lr(), cfg.lr0);
    }

    #[test]
    fn non_finite_loss_is_ignored_by_scheduler() {
        let mut st = OptimizerState::new(&TrainConfig::default(), 1);
        st.observe_loss(f64::NAN);
        assert_eq!(st.best_loss(), None);
        assert_eq!(st.plateau_counter(), 0);
    }

    #[test]
    fn reset_restores_initial_state() {
        let cfg = TrainConfig { plateau_patience: 1, ..TrainConfig::default() };
        let mut st = OptimizerState::new(&cfg, 2);
        let mut p = vec![0.0; 2];
        st.step(&mut p, &ParamGradient::from_vec(vec![1.0, -1.0])).unwrap();
        st.observe_loss(1.0);
        assert!(st.lr() < cfg.lr0);
        st.reset();
        assert_eq!(st.lr(), cfg.lr0);
        assert_eq!(st.iteration(), 0);
        assert!(st.first_moment().iter().chain(st.second_moment()).all(|&v| v == 0.0));
    }

    #[test]
    fn warm_start_copies_are_independent() {
        let src = ShallowNet::init(2, 4, 1, Activation::Tanh, 3).unwrap();
        let mut copy = warm_start(&src);
        assert_eq!(copy, src);
        let x = [0.3, -0.7];
        assert_eq!(copy.value(&x), src.value(&x));
        copy.params_mut()[0] += 1.0;
        assert_ne!(copy.params()[0], src.params()[0]);
    }

    proptest! {
        #[test]
        fn lr_never_increases(losses in proptest::collection::vec(0.0f64..10.0, 1..400)) {
            let cfg = TrainConfig { plateau_patience: 7, ..TrainConfig::default() };
            let mut st = OptimizerState::new(&cfg, 1);
            let mut prev = st.lr();
            for l in losses {
                st.observe_loss(l);
                prop_assert!(st.lr() <= prev);
                prop_assert!(st.lr() > 0.0);
                prev = st.lr();
            }
        }

        #[test]
        fn sgd_step_is_linear_in_gradient(
            g in proptest::collection::vec(-5.0f64..5.0, 4),
            lambda in -3.0f64..3.0,
        ) {
            let cfg = sgd(0.05);
            let start = vec![0.1, -0.2, 0.3, 0.4];
            let mut p1 = start.clone();
            OptimizerState::new(&cfg, 4).step(&mut p1, &ParamGradient::from_vec(g.clone())).unwrap();
            let mut p2 = start.clone();
            let scaled: Vec<f64> = g.iter().map(|v| lambda * v).collect();
            OptimizerState::new(&cfg, 4).step(&mut p2, &ParamGradient::from_vec(scaled)).unwrap();
            for j in 0..4 {
                prop_assert!(((p2[j] - start[j]) - lambda * (p1[j] - start[j])).abs() < 1e-12);
            }
        }
    }
}
