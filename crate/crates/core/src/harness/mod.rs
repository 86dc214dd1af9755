//! Experiment orchestration: configuration, multi-run statistics, CSV output
//! and the verification suite.

pub mod config;
pub mod output;
pub mod report;
pub mod verify;

pub use config::{ExperimentConfig, Preset, ProblemKey, CONFIG_ENV};
pub use output::{emit_losses, emit_runs, emit_slice, emit_table, sig6};
pub use report::{mean_std, run_experiment, run_experiment_with_losses, run_once, RunOutcome, RunReport};
