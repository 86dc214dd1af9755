//! Multi-run experiments and their summary statistics.

use std::time::Duration;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::schemes::{solve, LossRecord, Scheme, SolveResult, TrainedStack};
use crate::sde::StreamRng;

use super::config::ExperimentConfig;

/// Outcome of a single seeded solve.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    /// `NaN` when the solve failed outright.
    pub y0: f64,
    pub converged: bool,
    pub wall_time: Duration,
    /// Failure message for runs that raised an error instead of finishing.
    pub error: Option<String>,
}

/// Statistics over the `R` runs of one experiment.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scheme: Scheme,
    pub problem: String,
    pub runs: Vec<RunOutcome>,
    /// Mean of `Y0` over converged runs; `NaN` if none converged.
    pub mean: f64,
    /// Sample standard deviation (divisor `R−1`) over converged runs; `0` for a single run.
    pub std: f64,
    pub exact: Option<f64>,
    /// `|mean − exact| / |exact| · 100`.
    pub rel_err_pct: Option<f64>,
    pub converged_runs: usize,
}

impl RunReport {
    pub fn from_runs(scheme: Scheme, problem: impl Into<String>, runs: Vec<RunOutcome>, exact: Option<f64>) -> Self {
        let values: Vec<f64> = runs.iter().filter(|r| r.converged).map(|r| r.y0).collect();
        let (mean, std) = mean_std(&values);
        let rel_err_pct = match exact {
            Some(e) if mean.is_finite() && e != 0.0 => Some((mean - e).abs() / e.abs() * 100.0),
            _ => None,
        };
        Self { scheme, problem: problem.into(), converged_runs: values.len(), runs, mean, std, exact, rel_err_pct }
    }

    /// Fewer than half of the runs converged.
    pub fn not_converged(&self) -> bool {
        2 * self.converged_runs < self.runs.len()
    }

    pub fn notes(&self) -> String {
        let mut notes = Vec::new();
        if self.not_converged() {
            notes.push("NotConv".to_string());
        }
        let failed = self.runs.iter().filter(|r| r.error.is_some()).count();
        if failed > 0 {
            notes.push(format!("{failed} runs failed"));
        }
        notes.join(";")
    }

    pub fn total_wall_time(&self) -> Duration {
        self.runs.iter().map(|r| r.wall_time).sum()
    }
}

/// Mean and `R−1` standard deviation; `(NaN, NaN)` for an empty slice and `std = 0` for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    match values.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (values[0], 0.0),
        n => {
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (mean, var.sqrt())
        }
    }
}

/// A finished run together with its artefacts.
pub struct RunArtifacts {
    pub result: SolveResult,
    pub stack: Option<TrainedStack>,
}

/// Runs one seeded solve of the configured experiment.
pub fn run_once(config: &ExperimentConfig, r: usize) -> Result<RunArtifacts> {
    let problem = config.build_problem()?;
    let grid = config.grid()?;
    let rng = StreamRng::new(config.run_seed(r));
    let (result, stack) = solve(config.scheme, &problem, &grid, &config.solver, &rng)?;
    Ok(RunArtifacts { result, stack })
}

/// Runs all `R` solves (in parallel) and summarises them. Individual runs that
/// error out are recorded as non-converged; configuration errors abort.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_experiment_with_losses(config)?.0)
}

/// As [`run_experiment`], also returning each run's loss history (empty unless recorded).
pub fn run_experiment_with_losses(config: &ExperimentConfig) -> Result<(RunReport, Vec<Vec<LossRecord>>)> {
    let problem = config.build_problem()?;
    config.grid()?;
    let exact = problem.exact_u(0.0, problem.x0());
    let outcomes: Vec<(RunOutcome, Vec<LossRecord>)> = (0..config.runs)
        .into_par_iter()
        .map(|r| {
            let seed = config.run_seed(r);
            match run_once(config, r) {
                Ok(a) => (
                    RunOutcome {
                        seed,
                        y0: a.result.y0,
                        converged: a.result.converged && a.result.y0.is_finite(),
                        wall_time: a.result.wall_time,
                        error: None,
                    },
                    a.result.losses,
                ),
                Err(e) => (
                    RunOutcome { seed, y0: f64::NAN, converged: false, wall_time: Duration::ZERO, error: Some(e.to_string()) },
                    Vec::new(),
                ),
            }
        })
        .collect();
    if outcomes.iter().all(|(o, _)| matches!(&o.error, Some(m) if is_contract(m))) {
        if let Some(m) = outcomes.first().and_then(|(o, _)| o.error.clone()) {
            return Err(Error::Contract(m));
        }
    }
    let (runs, losses) = outcomes.into_iter().unzip();
    Ok((RunReport::from_runs(config.scheme, problem.name(), runs, exact), losses))
}

fn is_contract(msg: &str) -> bool {
    msg.starts_with("contract violation") || msg.starts_with("invalid configuration")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(y0: f64, converged: bool) -> RunOutcome {
        RunOutcome { seed: 0, y0, converged, wall_time: Duration::ZERO, error: None }
    }

    #[test]
    fn statistics_use_converged_runs_only() {
        let runs = vec![outcome(1.0, true), outcome(3.0, true), outcome(f64::NAN, false)];
        let rep = RunReport::from_runs(Scheme::Dadm, "p", runs, Some(2.5));
        assert_eq!(rep.converged_runs, 2);
        assert_eq!(rep.mean, 2.0);
        assert!((rep.std - 2f64.sqrt()).abs() < 1e-15);
        assert!((rep.rel_err_pct.unwrap() - 20.0).abs() < 1e-12);
        assert!(!rep.not_converged());
    }

    #[test]
    fn majority_divergence_is_not_converged() {
        let runs = vec![outcome(1.0, true), outcome(f64::NAN, false), outcome(f64::NAN, false)];
        let rep = RunReport::from_runs(Scheme::DeepBsde, "p", runs, Some(1.0));
        assert!(rep.not_converged());
        assert_eq!(rep.notes(), "NotConv");
        let none = RunReport::from_runs(Scheme::DeepBsde, "p", vec![outcome(f64::NAN, false)], Some(1.0));
        assert!(none.mean.is_nan() && none.rel_err_pct.is_none());
    }

    #[test]
    fn single_run_has_zero_std() {
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
