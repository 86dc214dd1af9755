//! Experiment configuration: flat `key=value` files, presets and overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::{Activation, WeightConstraint};
use crate::optim::Method;
use crate::problems::{bounded_example, cosine_heat, linear_terminal, unbounded_example, BoundedParams, BsdeProblem, UnboundedParams};
use crate::schemes::{Scheme, SolverConfig};
use crate::sde::TimeGrid;

/// Environment variable naming a config file to load before command-line overrides.
pub const CONFIG_ENV: &str = "DADM_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKey {
    Bounded,
    Unbounded,
    /// `b = μ1`, `σ = sI`, `f ≡ 0`, `g = cos(Σx)`.
    Cosine,
    /// `b = μ1`, `σ = sI`, `f ≡ 0`, `g = Σx`.
    Linear,
}

impl ProblemKey {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKey::Bounded => "bounded",
            ProblemKey::Unbounded => "unbounded",
            ProblemKey::Cosine => "cosine",
            ProblemKey::Linear => "linear",
        }
    }
}

impl FromStr for ProblemKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bounded" => Ok(ProblemKey::Bounded),
            "unbounded" => Ok(ProblemKey::Unbounded),
            "cosine" | "cos" => Ok(ProblemKey::Cosine),
            "linear" => Ok(ProblemKey::Linear),
            other => Err(Error::Config(format!(
                "unknown problem '{other}' (expected bounded, unbounded, cosine or linear)"
            ))),
        }
    }
}

impl fmt::Display for ProblemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named training budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// `N = 40`, 1500/500 iterations, `M = 256`.
    Desk,
    /// `N = 180`, 5000/1000 iterations, `M = 1000`.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKey,
    pub dim: usize,
    pub horizon: f64,
    /// `None` keeps the problem's default starting point.
    pub x0: Option<Vec<f64>>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub scheme: Scheme,
    pub n_steps: usize,
    pub runs: usize,
    /// Run `r` uses seed `seed + r`.
    pub seed: u64,
    pub solver: SolverConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKey::Bounded,
            dim: 1,
            horizon: 1.0,
            x0: None,
            mu: None,
            sigma: None,
            scheme: Scheme::Dadm,
            n_steps: 40,
            runs: 5,
            seed: 42,
            solver: SolverConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Config with the given preset's step count and training budget.
    pub fn with_preset(preset: Preset) -> Self {
        let mut cfg = Self::default();
        cfg.apply_preset(preset);
        cfg
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let train = &mut self.solver.train;
        match preset {
            Preset::Desk => {
                self.n_steps = 40;
                train.iterations = 1500;
                train.subsequent_iterations = 500;
                train.batch_size = 256;
            }
            Preset::Paper => {
                self.n_steps = 180;
                train.iterations = 5000;
                train.subsequent_iterations = 1000;
                train.batch_size = 1000;
            }
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let train = &mut self.solver.train;
        match key.trim() {
            "preset" => self.apply_preset(value.parse()?),
            "problem" => self.problem = value.parse()?,
            "scheme" => self.scheme = value.parse()?,
            "d" | "dim" => self.dim = parse(key, value)?,
            "T" | "horizon" => self.horizon = parse(key, value)?,
            "x0" => self.x0 = Some(parse_list(key, value)?),
            "mu" => self.mu = Some(parse(key, value)?),
            "sigma" => self.sigma = Some(parse(key, value)?),
            "N" | "steps" => self.n_steps = parse(key, value)?,
            "runs" | "R" => self.runs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "iterations" => train.iterations = parse(key, value)?,
            "subsequent_iterations" => train.subsequent_iterations = parse(key, value)?,
            "batch_size" | "M" => train.batch_size = parse(key, value)?,
            "lr" => train.lr0 = parse(key, value)?,
            "plateau_tolerance" => train.plateau_tolerance = parse(key, value)?,
            "plateau_patience" => train.plateau_patience = parse(key, value)?,
            "optimizer" => train.method = value.parse::<Method>()?,
            "activation" => self.solver.activation = value.parse::<Activation>()?,
            "hidden" => self.solver.hidden = Some(parse(key, value)?),
            "tail_average" => self.solver.tail_average = parse(key, value)?,
            "theory" => {
                self.solver.theory = match value {
                    "off" | "false" | "0" => None,
                    g => Some(WeightConstraint::new(parse(key, g)?)?),
                }
            }
            "record_losses" => self.solver.record_losses = parse_bool(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every non-comment line of a `key=value` text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config("T must be positive".into()));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != 1 && x0.len() != self.dim {
                return Err(Error::Config(format!("x0 has {} entries, expected 1 or {}", x0.len(), self.dim)));
            }
        }
        self.solver.validate()
    }

    fn x0_or(&self, default: f64) -> Vec<f64> {
        match &self.x0 {
            Some(v) if v.len() == 1 => vec![v[0]; self.dim],
            Some(v) => v.clone(),
            None => vec![default; self.dim],
        }
    }

    pub fn build_problem(&self) -> Result<BsdeProblem> {
        self.validate()?;
        let d = self.dim;
        match self.problem {
            ProblemKey::Bounded => {
                let mut p = BoundedParams::new(d, self.horizon);
                p.x0 = self.x0_or(1.0);
                if let Some(mu) = self.mu {
                    p.mu = mu;
                }
                if let Some(s) = self.sigma {
                    p.sigma = s;
                }
                bounded_example(&p)
            }
            ProblemKey::Unbounded => {
                if self.mu.is_some() || self.sigma.is_some() {
                    return Err(Error::Config("the unbounded example has fixed b = 0 and σ = I/√d".into()));
                }
                let mut p = UnboundedParams::new(d, self.horizon);
                p.x0 = self.x0_or(0.5);
                unbounded_example(&p)
            }
            ProblemKey::Cosine => {
                cosine_heat(d, self.horizon, self.mu.unwrap_or(0.0), self.sigma.unwrap_or(1.0), self.x0_or(0.0))
            }
            ProblemKey::Linear => {
                linear_terminal(d, self.horizon, self.mu.unwrap_or(0.0), self.sigma.unwrap_or(1.0), self.x0_or(0.0))
            }
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.n_steps, self.horizon)
    }

    /// Seed of run `r`.
    pub fn run_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}
