//! Trained backward stacks and the read-only queries run on them.

use crate::error::{contract, Error, Result};
use crate::net::ShallowNet;
use crate::problems::{sigma_transpose_times, BsdeProblem};
use crate::sde::{simulate_paths, StreamRng, TimeGrid};

use super::SigmaEval;

/// Source of `∇g` for the last Z.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalModel {
    /// The problem's own `∇g`.
    Analytic,
    /// A network `g̃` fitted to `g(X_N)`; only its input gradient is used.
    Fitted(ShallowNet),
}

/// How `Ẑ_i` is read off a stack.
#[derive(Debug, Clone, PartialEq)]
pub enum ZRule {
    /// `Ẑ_i = σ(t_i,·)ᵀ D_x Û_{i+1}`, with `∇g` at `i = N−1`.
    NextGradient,
    /// `Ẑ_i = σ(t_i,·)ᵀ D_x Û_i`.
    OwnGradient,
    /// A separate `d → d` network per step.
    Networks(Vec<Option<ShallowNet>>),
}

/// Networks `Û_0..Û_{N−1}` trained by a backward scheme, plus what is needed
/// to evaluate `Ẑ_i` on every step.
#[derive(Debug, Clone)]
pub struct TrainedStack {
    problem: BsdeProblem,
    grid: TimeGrid,
    nets: Vec<Option<ShallowNet>>,
    terminal: TerminalModel,
    z_rule: ZRule,
}

impl TrainedStack {
    pub fn new(problem: BsdeProblem, grid: TimeGrid, terminal: TerminalModel, z_rule: ZRule) -> Result<Self> {
        super::check_grid(&problem, &grid)?;
        if terminal == TerminalModel::Analytic && z_rule == ZRule::NextGradient && !problem.has_terminal_grad() {
            return Err(contract("problem has no analytic ∇g; fit a terminal network first"));
        }
        let n = grid.n_steps();
        let z_rule = match z_rule {
            ZRule::Networks(v) if v.is_empty() => ZRule::Networks(vec![None; n]),
            ZRule::Networks(v) if v.len() != n => return Err(contract("one Z network slot per step is required")),
            other => other,
        };
        Ok(Self { problem, grid, nets: vec![None; n], terminal, z_rule })
    }

    pub fn problem(&self) -> &BsdeProblem {
        &self.problem
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn terminal_model(&self) -> &TerminalModel {
        &self.terminal
    }

    pub fn z_rule(&self) -> &ZRule {
        &self.z_rule
    }

    pub fn net(&self, i: usize) -> Option<&ShallowNet> {
        self.nets.get(i).and_then(|n| n.as_ref())
    }

    pub fn z_net(&self, i: usize) -> Option<&ShallowNet> {
        match &self.z_rule {
            ZRule::Networks(v) => v.get(i).and_then(|n| n.as_ref()),
            _ => None,
        }
    }

    pub fn is_trained(&self, i: usize) -> bool {
        self.net(i).is_some() && (!matches!(self.z_rule, ZRule::Networks(_)) || self.z_net(i).is_some())
    }

    /// Whether every step in `from..N` has been trained.
    pub fn trained_from(&self, from: usize) -> bool {
        (from..self.n_steps()).all(|j| self.is_trained(j))
    }

    pub fn set_net(&mut self, i: usize, net: ShallowNet) -> Result<()> {
        self.check_net(&net, 1)?;
        let slot = self.nets.get_mut(i).ok_or_else(|| contract(format!("step {i} is outside the grid")))?;
        *slot = Some(net);
        Ok(())
    }

    pub fn set_z_net(&mut self, i: usize, net: ShallowNet) -> Result<()> {
        self.check_net(&net, self.problem.dim())?;
        match &mut self.z_rule {
            ZRule::Networks(v) => {
                let slot = v.get_mut(i).ok_or_else(|| contract(format!("step {i} is outside the grid")))?;
                *slot = Some(net);
                Ok(())
            }
            _ => Err(contract("this stack derives Z from U networks")),
        }
    }

    fn check_net(&self, net: &ShallowNet, out: usize) -> Result<()> {
        if net.input_dim() != self.problem.dim() || net.output_dim() != out {
            return Err(contract(format!(
                "network maps {}→{}, expected {}→{out}",
                net.input_dim(),
                net.output_dim(),
                self.problem.dim()
            )));
        }
        Ok(())
    }

    fn require(&self, i: usize) -> Result<()> {
        if i >= self.n_steps() {
            return Err(contract(format!("step {i} is outside 0..{}", self.n_steps())));
        }
        if !self.is_trained(i) {
            return Err(contract(format!("step {i} has not been trained")));
        }
        if matches!(self.z_rule, ZRule::NextGradient) && i + 1 < self.n_steps() && self.net(i + 1).is_none() {
            return Err(contract(format!("Ẑ_{i} needs step {} to be trained", i + 1)));
        }
        Ok(())
    }

    /// `Û_i(x)`; `g(x)` at `i = N`.
    pub fn u(&self, i: usize, x: &[f64]) -> Result<f64> {
        if x.len() != self.problem.dim() {
            return Err(contract("point has wrong dimension"));
        }
        if i == self.n_steps() {
            return Ok(self.problem.terminal(x));
        }
        self.net(i).map(|n| n.value(x)).ok_or_else(|| contract(format!("step {i} has not been trained")))
    }

    /// `Ẑ_i(x)` for `i ∈ 0..N`.
    pub fn z(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.problem.dim() {
            return Err(contract("point has wrong dimension"));
        }
        self.require(i)?;
        let mut ev = FrozenEval::new(self);
        let mut z = vec![0.0; self.problem.dim()];
        ev.z(self, i, x, &mut z);
        Ok(z)
    }
}

/// Scratch space for repeated `Û_j`, `Ẑ_j` evaluations on trained steps.
pub(crate) struct FrozenEval {
    sigma: SigmaEval,
    grad: Vec<f64>,
}

impl FrozenEval {
    pub(crate) fn new(stack: &TrainedStack) -> Self {
        Self { sigma: SigmaEval::new(&stack.problem), grad: vec![0.0; stack.problem.dim()] }
    }

    /// Writes `Ẑ_j(x)`. Steps involved must be trained.
    #[inline]
    pub(crate) fn z(&mut self, stack: &TrainedStack, j: usize, x: &[f64], z: &mut [f64]) {
        let n = stack.n_steps();
        let t = stack.grid.time(j);
        match &stack.z_rule {
            ZRule::NextGradient => {
                if j + 1 == n {
                    terminal_gradient(stack, x, &mut self.grad);
                } else {
                    stack.nets[j + 1].as_ref().expect("trained").value_and_grad_input(x, &mut self.grad);
                }
                sigma_transpose_times(self.sigma.at(&stack.problem, t, x), &self.grad, z);
            }
            ZRule::OwnGradient => {
                stack.nets[j].as_ref().expect("trained").value_and_grad_input(x, &mut self.grad);
                sigma_transpose_times(self.sigma.at(&stack.problem, t, x), &self.grad, z);
            }
            ZRule::Networks(v) => v[j].as_ref().expect("trained").forward_into(x, z),
        }
    }
}

fn terminal_gradient(stack: &TrainedStack, x: &[f64], out: &mut [f64]) {
    match &stack.terminal {
        TerminalModel::Analytic => {
            stack.problem.terminal_grad(x, out);
        }
        TerminalModel::Fitted(net) => {
            net.value_and_grad_input(x, out);
        }
    }
}

/// One row of a slice evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRow {
    pub x: Vec<f64>,
    pub u_hat: f64,
    pub z_hat: Vec<f64>,
    pub u_exact: Option<f64>,
    pub z_exact: Option<Vec<f64>>,
}

/// Evaluates `Û_i`, `Ẑ_i` and, when the problem carries it, the exact solution at each point.
pub fn evaluate_slice(stack: &TrainedStack, i: usize, xs: &[Vec<f64>]) -> Result<Vec<SliceRow>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    stack.require(i)?;
    let d = stack.problem.dim();
    let t = stack.grid.time(i);
    let mut ev = FrozenEval::new(stack);
    let mut rows = Vec::with_capacity(xs.len());
    for x in xs {
        if x.len() != d {
            return Err(contract("slice point has wrong dimension"));
        }
        let u_hat = stack.u(i, x)?;
        let mut z_hat = vec![0.0; d];
        ev.z(stack, i, x, &mut z_hat);
        rows.push(SliceRow {
            x: x.clone(),
            u_hat,
            z_hat,
            u_exact: stack.problem.exact_u(t, x),
            z_exact: stack.problem.exact_z(t, x),
        });
    }
    Ok(rows)
}

/// Sample mean and standard error of one step's weak residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStat {
    pub step: usize,
    pub mean: f64,
    pub std_error: f64,
}

impl ResidualStat {
    /// `|mean| ≤ k · SE`.
    pub fn within(&self, k: f64) -> bool {
        self.mean.abs() <= k * self.std_error
    }
}

/// Per-step weak residual `Û_{i+1}(X_{i+1}) − Û_i(X_i) + f(t_i, X_i, Û_i, Ẑ_i)Δt_i − Ẑ_i·ΔW_i`
/// averaged over `n_paths` fresh paths (`Û_N = g`).
pub fn martingale_residual(stack: &TrainedStack, n_paths: usize, rng: &StreamRng) -> Result<Vec<ResidualStat>> {
    let n = stack.n_steps();
    if !stack.trained_from(0) {
        return Err(contract("martingale residual needs a fully trained stack"));
    }
    if n_paths < 2 {
        return Err(contract("at least two paths are needed for a standard error"));
    }
    let problem = &stack.problem;
    let batch = simulate_paths(problem, &stack.grid, n_paths, rng)?;
    let d = problem.dim();
    let mut ev = FrozenEval::new(stack);
    let mut z = vec![0.0; d];
    let mut stats = Vec::with_capacity(n);
    let mut r = vec![0.0; n_paths];
    for i in 0..n {
        let t = stack.grid.time(i);
        let dt = stack.grid.dt(i);
        for (k, rk) in r.iter_mut().enumerate() {
            let x = batch.state(k, i);
            let u = stack.u(i, x)?;
            ev.z(stack, i, x, &mut z);
            let dw = batch.increment(k, i);
            let zdw: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
            let next = stack.u(i + 1, batch.state(k, i + 1))?;
            *rk = next - u + problem.generator().eval(t, x, u, &z) * dt - zdw;
        }
        let mean = r.iter().sum::<f64>() / n_paths as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_paths - 1) as f64;
        if !mean.is_finite() || !var.is_finite() {
            return Err(Error::NonFinite(format!("martingale residual at step {i}")));
        }
        stats.push(ResidualStat { step: i, mean, std_error: (var / n_paths as f64).sqrt() });
    }
    Ok(stats)
}
