//! Backward schemes for decoupled FBSDEs.
//!
//! All four schemes share the same ingredients: Euler paths from [`crate::sde`],
//! shallow networks from [`crate::net`] and the optimizer in [`crate::optim`].
//! They differ in what each network is asked to regress onto.
//!
//! | scheme    | unknowns per step            | target at step `i`                         |
//! |-----------|------------------------------|--------------------------------------------|
//! | DADM      | `U_i`                        | multistep sum `A_i` built from frozen nets |
//! | DBDP1     | `U_i`, `Z_i`                 | `Û_{i+1}(X_{i+1})`                         |
//! | DBDP2     | `U_i`, `Z_i = σᵀ D_x U_i`    | `Û_{i+1}(X_{i+1})`                         |
//! | Deep BSDE | `U_0`, `Z_0..Z_{N-1}` jointly | `g(X_N)` through the forward recursion    |
//!
//! The backward residual convention throughout is
//! `Y_i = Y_{i+1} + f(t_i, X_i, Y_i, Z_i) Δt_i − Z_i·ΔW_i`.

mod dadm;
mod dbdp;
mod deep_bsde;
mod stack;
mod terminal;

use std::str::FromStr;
use std::time::Duration;

pub use dadm::{dadm_empirical_loss, multistep_targets, multistep_target_table, solve_dadm, train_dadm_step};
pub use dbdp::{dbdp1_empirical_loss, dbdp2_empirical_loss, solve_dbdp1, solve_dbdp2};
pub use deep_bsde::{deep_bsde_loss, solve_deep_bsde, DeepBsdeModel};
pub use stack::{evaluate_slice, martingale_residual, ResidualStat, SliceRow, TerminalModel, TrainedStack, ZRule};
pub use terminal::{fit_terminal, terminal_model_for};


use crate::error::{Error, Result};
use crate::net::{Activation, ParamGradient, ShallowNet, WeightConstraint};
use crate::optim::{OptimizerState, StepOutcome, TrainConfig};
use crate::problems::BsdeProblem;
use crate::sde::{StreamRng, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Dadm,
    Dbdp1,
    Dbdp2,
    DeepBsde,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Dadm, Scheme::Dbdp1, Scheme::Dbdp2, Scheme::DeepBsde];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Dadm => "dadm",
            Scheme::Dbdp1 => "dbdp1",
            Scheme::Dbdp2 => "dbdp2",
            Scheme::DeepBsde => "deepbsde",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dadm" => Ok(Scheme::Dadm),
            "dbdp1" => Ok(Scheme::Dbdp1),
            "dbdp2" => Ok(Scheme::Dbdp2),
            "deepbsde" | "deep_bsde" | "dbsde" => Ok(Scheme::DeepBsde),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}' (expected dadm, dbdp1, dbdp2 or deepbsde)"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub train: TrainConfig,
    /// Hidden width; `None` means `d + 10`.
    pub hidden: Option<usize>,
    pub activation: Activation,
    /// Project every scalar network onto the weight-constrained class after each update.
    pub theory: Option<WeightConstraint>,
    /// A step whose final loss exceeds this multiple of its initial loss counts as diverged.
    pub divergence_factor: f64,
    /// Keep every `(step, iteration, loss)` triple in the result.
    pub record_losses: bool,
    /// Fraction of each step's iterations, counted from the end, whose iterates
    /// are averaged into the stored network. `0` keeps the last iterate.
    pub tail_average: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            hidden: None,
            activation: Activation::Tanh,
            theory: None,
            divergence_factor: 1e6,
            record_losses: false,
            tail_average: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn hidden_width(&self, dim: usize) -> usize {
        self.hidden.unwrap_or(dim + 10)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tail_average) {
            return Err(Error::Config("tail_average must lie in [0, 1)".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub scheme: Scheme,
    /// `Û_0(x0)`.
    pub y0: f64,
    /// `Ẑ_0(x0)`.
    pub z0: Vec<f64>,
    /// Last observed loss of each time step (`NaN` for steps that were never trained).
    /// Deep BSDE trains a single global loss and reports it at index 0.
    pub step_losses: Vec<f64>,
    pub converged: bool,
    pub wall_time: Duration,
    /// Full loss history; empty unless [`SolverConfig::record_losses`] is set.
    pub losses: Vec<LossRecord>,
}

/// Solves with any scheme. Deep BSDE produces no backward stack.
pub fn solve(
    scheme: Scheme,
    problem: &BsdeProblem,
    grid: &TimeGrid,
    config: &SolverConfig,
    rng: &StreamRng,
) -> Result<(SolveResult, Option<TrainedStack>)> {
    match scheme {
        Scheme::Dadm => solve_dadm(problem, grid, config, rng).map(|(r, s)| (r, Some(s))),
        Scheme::Dbdp1 => solve_dbdp1(problem, grid, config, rng).map(|(r, s)| (r, Some(s))),
        Scheme::Dbdp2 => solve_dbdp2(problem, grid, config, rng).map(|(r, s)| (r, Some(s))),
        Scheme::DeepBsde => solve_deep_bsde(problem, grid, config, rng).map(|(r, _)| (r, None)),
    }
}

// Seed tags for the independent streams a solve draws from.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_BATCH: u64 = 2;
pub(crate) const TAG_TERMINAL: u64 = 3;

/// Stream for the batch of iteration `iter`. Every time step sees the same
/// sequence of batches; within a step each iteration gets a new one.
pub(crate) fn batch_stream(rng: &StreamRng, iter: usize) -> StreamRng {
    rng.derive(TAG_BATCH).derive(iter as u64)
}

pub(crate) fn init_seed(rng: &StreamRng, which: u64) -> u64 {
    rng.derive(TAG_INIT).derive(which).seed()
}

pub(crate) fn check_grid(problem: &BsdeProblem, grid: &TimeGrid) -> Result<()> {
    if (grid.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon().max(1.0) {
        return Err(crate::error::contract(format!(
            "grid horizon {} does not match problem horizon {}",
            grid.horizon(),
            problem.horizon()
        )));
    }
    Ok(())
}

/// σ(t, x) without re-evaluating constant coefficients.
pub(crate) struct SigmaEval {
    constant: Option<Vec<f64>>,
    buf: Vec<f64>,
}

impl SigmaEval {
    pub(crate) fn new(problem: &BsdeProblem) -> Self {
        let d = problem.dim();
        Self { constant: problem.diffusion().constant().map(|m| m.to_vec()), buf: vec![0.0; d * d] }
    }

    #[inline]
    pub(crate) fn at(&mut self, problem: &BsdeProblem, t: f64, x: &[f64]) -> &[f64] {
        match &self.constant {
            Some(m) => m,
            None => {
                problem.diffusion().eval(t, x, &mut self.buf);
                &self.buf
            }
        }
    }
}

/// Loss summary of one trained time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub initial: f64,
    pub last: f64,
    pub diverged: bool,
}

/// Runs `iters` iterations of `body`, which must compute the loss on a fresh
/// batch and apply one optimizer update. The loss is fed to the scheduler.
pub(crate) fn run_iterations<F>(
    iters: usize,
    step: usize,
    opt: &mut OptimizerState,
    config: &SolverConfig,
    losses: &mut Vec<LossRecord>,
    mut body: F,
) -> Result<StepTrace>
where
    F: FnMut(usize, &mut OptimizerState) -> Result<f64>,
{
    let mut initial = f64::NAN;
    let mut last = f64::NAN;
    for it in 0..iters {
        let loss = body(it, opt)?;
        if config.record_losses {
            losses.push(LossRecord { step, iteration: it, loss });
        }
        if it == 0 {
            initial = loss;
        }
        last = loss;
        if !loss.is_finite() {
            return Ok(StepTrace { initial, last, diverged: true });
        }
        opt.observe_loss(loss);
    }
    let diverged = !last.is_finite() || last > config.divergence_factor * initial;
    Ok(StepTrace { initial, last, diverged })
}

/// Running mean of the parameter iterates from iteration `start` on.
pub(crate) struct TailAverage {
    start: usize,
    count: usize,
    sum: Vec<f64>,
}

impl TailAverage {
    pub(crate) fn new(iters: usize, net: &ShallowNet, config: &SolverConfig) -> Self {
        let tail = (config.tail_average * iters as f64).floor() as usize;
        Self { start: iters - tail, count: 0, sum: vec![0.0; net.param_count()] }
    }

    pub(crate) fn observe(&mut self, it: usize, net: &ShallowNet) {
        if it >= self.start {
            self.count += 1;
            self.sum.iter_mut().zip(net.params()).for_each(|(s, p)| *s += p);
        }
    }

    /// Replaces `net` by the average, projected again in theory mode.
    pub(crate) fn finish(self, net: &mut ShallowNet, config: &SolverConfig) -> Result<()> {
        if self.count == 0 {
            return Ok(());
        }
        let inv = 1.0 / self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s * inv).collect();
        if mean.iter().all(|v| v.is_finite()) {
            net.params_mut().copy_from_slice(&mean);
            if let (Some(c), 1) = (&config.theory, net.output_dim()) {
                *net = net.project_weights(c)?;
            }
        }
        Ok(())
    }
}

/// One optimizer update of a scalar net, followed by the theory-mode projection.
pub(crate) fn update_scalar_net(
    opt: &mut OptimizerState,
    net: &mut ShallowNet,
    grad: &ParamGradient,
    config: &SolverConfig,
) -> Result<()> {
    if opt.step_net(net, grad)? == StepOutcome::Applied {
        if let Some(c) = &config.theory {
            *net = net.project_weights(c)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_keys_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("dbdp3".parse::<Scheme>().is_err());
    }

    #[test]
    fn default_width_is_dim_plus_ten() {
        let c = SolverConfig::default();
        assert_eq!(c.hidden_width(1), 11);
        assert_eq!(c.hidden_width(20), 30);
        assert_eq!(SolverConfig { hidden: Some(4), ..c }.hidden_width(20), 4);
    }
}
