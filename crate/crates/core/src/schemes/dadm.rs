//! The multistep scheme.
//!
//! At step `i` the candidate `U_i` is regressed onto
//! `A_i + f(t_i, X_i, U_i(X_i), Ẑ_i(X_i))Δt_i − Ẑ_i(X_i)·ΔW_i` where
//! `A_i = g(X_N) + Σ_{j>i} [f(t_j, X_j, Û_j, Ẑ_j)Δt_j − Ẑ_j·ΔW_j]` uses the
//! already trained (frozen) networks, and `Ẑ_j = σ(t_j,·)ᵀ D_x Û_{j+1}`.
//! Since `Ẑ_i` is frozen too, each step is a plain regression in `θ_i`.

use std::time::Instant;

use crate::error::{contract, Result};
use crate::net::{ParamGradient, ShallowNet};
use crate::optim::{warm_start, OptimizerState};
use crate::problems::BsdeProblem;
use crate::sde::{simulate_paths, simulate_until, PathBatch, StreamRng, TimeGrid};

use super::stack::FrozenEval;
use super::{
    batch_stream, check_grid, init_seed, run_iterations, terminal_model_for, update_scalar_net, TailAverage, LossRecord,
    SolveResult, SolverConfig, StepTrace, TrainedStack, ZRule, Scheme,
};

fn check_batch(stack: &TrainedStack, i: usize, batch: &PathBatch) -> Result<()> {
    if i >= stack.n_steps() {
        return Err(contract(format!("step {i} is outside 0..{}", stack.n_steps())));
    }
    if batch.grid() != stack.grid() || batch.dim() != stack.problem().dim() {
        return Err(contract("batch was simulated on a different grid or dimension"));
    }
    if batch.start_step() > i || batch.end_step() != stack.n_steps() {
        return Err(contract(format!("batch must cover steps {i}..={}", stack.n_steps())));
    }
    if !stack.trained_from(i + 1) {
        return Err(contract(format!("steps {}..{} must be trained before step {i}", i + 1, stack.n_steps())));
    }
    Ok(())
}

/// `A_j` for every `j ∈ from..N` and every path, row-major `M × (N − from)`,
/// computed by one backward sweep `A_{N−1} = g(X_N)`,
/// `A_j = A_{j+1} + f(t_{j+1}, ·)Δt_{j+1} − Ẑ_{j+1}·ΔW_{j+1}`.
pub fn multistep_target_table(stack: &TrainedStack, from: usize, batch: &PathBatch) -> Result<Vec<f64>> {
    check_batch(stack, from, batch)?;
    let n = stack.n_steps();
    let width = n - from;
    let m = batch.n_paths();
    let mut out = vec![0.0; m * width];
    let problem = stack.problem();
    let mut ev = FrozenEval::new(stack);
    let mut z = vec![0.0; problem.dim()];
    for k in 0..m {
        let row = &mut out[k * width..(k + 1) * width];
        let mut acc = problem.terminal(batch.state(k, n));
        row[width - 1] = acc;
        for j in (from + 1..n).rev() {
            acc += frozen_increment(stack, &mut ev, batch, k, j, &mut z);
            row[j - 1 - from] = acc;
        }
    }
    Ok(out)
}

/// `A_i` on every path of the batch.
pub fn multistep_targets(stack: &TrainedStack, i: usize, batch: &PathBatch) -> Result<Vec<f64>> {
    check_batch(stack, i, batch)?;
    let n = stack.n_steps();
    let problem = stack.problem();
    let mut ev = FrozenEval::new(stack);
    let mut z = vec![0.0; problem.dim()];
    let mut out = Vec::with_capacity(batch.n_paths());
    for k in 0..batch.n_paths() {
        let mut acc = problem.terminal(batch.state(k, n));
        for j in (i + 1..n).rev() {
            acc += frozen_increment(stack, &mut ev, batch, k, j, &mut z);
        }
        out.push(acc);
    }
    Ok(out)
}

/// `f(t_j, X_j, Û_j, Ẑ_j)Δt_j − Ẑ_j·ΔW_j` on path `k`.
#[inline]
fn frozen_increment(
    stack: &TrainedStack,
    ev: &mut FrozenEval,
    batch: &PathBatch,
    k: usize,
    j: usize,
    z: &mut [f64],
) -> f64 {
    let grid = stack.grid();
    let x = batch.state(k, j);
    let u = stack.net(j).expect("trained").value(x);
    ev.z(stack, j, x, z);
    let zdw: f64 = z.iter().zip(batch.increment(k, j)).map(|(a, b)| a * b).sum();
    stack.problem().generator().eval(grid.time(j), x, u, z) * grid.dt(j) - zdw
}

/// Everything about a batch that does not depend on the candidate network.
struct Prepared {
    t: f64,
    dt: f64,
    x: Vec<f64>,
    /// `A_i − Ẑ_i·ΔW_i`.
    base: Vec<f64>,
    z: Vec<f64>,
}

/// Frozen part of the loss at step `i` given `A_i` on each path of `batch`.
fn prepare_with(stack: &TrainedStack, i: usize, batch: &PathBatch, a: &[f64]) -> Prepared {
    let d = stack.problem().dim();
    let m = batch.n_paths();
    let mut ev = FrozenEval::new(stack);
    let mut x = Vec::with_capacity(m * d);
    let mut z = vec![0.0; m * d];
    let mut base = Vec::with_capacity(m);
    for k in 0..m {
        let xi = batch.state(k, i);
        x.extend_from_slice(xi);
        let zk = &mut z[k * d..(k + 1) * d];
        ev.z(stack, i, xi, zk);
        let zdw: f64 = zk.iter().zip(batch.increment(k, i)).map(|(a, b)| a * b).sum();
        base.push(a[k] - zdw);
    }
    Prepared { t: stack.grid().time(i), dt: stack.grid().dt(i), x, base, z }
}

fn prepare(stack: &TrainedStack, i: usize, batch: &PathBatch) -> Result<Prepared> {
    let a = multistep_targets(stack, i, batch)?;
    Ok(prepare_with(stack, i, batch, &a))
}

/// `A_i` for the batches of iterations `0..rows.len()`.
///
/// Batch `it` is the same set of paths at every time step, so once `Û_i` is
/// trained `A_{i−1} = A_i + f(t_i, ·)Δt_i − Ẑ_i·ΔW_i` costs one network pass
/// per path instead of a sweep over all later steps.
struct TargetCache {
    step: usize,
    rows: Vec<Vec<f64>>,
}

impl TargetCache {
    fn get(&self, i: usize, it: usize) -> Option<&[f64]> {
        (self.step == i).then(|| self.rows.get(it).map(|r| r.as_slice())).flatten()
    }
}

/// Prepared loss inputs for iteration `it` at step `i`, reusing cached `A_i` when possible.
fn batch_for(
    stack: &TrainedStack,
    i: usize,
    it: usize,
    m: usize,
    rng: &StreamRng,
    cache: Option<&TargetCache>,
) -> Result<Prepared> {
    let problem = stack.problem();
    let stream = batch_stream(rng, it);
    match cache.and_then(|c| c.get(i, it)) {
        Some(a) => {
            let batch = simulate_until(problem, stack.grid(), i + 1, m, &stream)?;
            Ok(prepare_with(stack, i, &batch, a))
        }
        None => {
            let batch = simulate_paths(problem, stack.grid(), m, &stream)?;
            prepare(stack, i, &batch)
        }
    }
}

/// Moves the cache from `A_i` to `A_{i−1}` for iterations `0..keep`, after `Û_i` was trained.
fn advance_cache(
    stack: &TrainedStack,
    i: usize,
    keep: usize,
    m: usize,
    rng: &StreamRng,
    cache: Option<TargetCache>,
) -> Result<TargetCache> {
    let problem = stack.problem();
    let mut ev = FrozenEval::new(stack);
    let mut z = vec![0.0; problem.dim()];
    let mut rows = Vec::with_capacity(keep);
    for it in 0..keep {
        let stream = batch_stream(rng, it);
        let cached = cache.as_ref().and_then(|c| c.get(i, it));
        let (batch, a) = match cached {
            Some(a) => (simulate_until(problem, stack.grid(), i + 1, m, &stream)?, a.to_vec()),
            None => {
                let batch = simulate_paths(problem, stack.grid(), m, &stream)?;
                let a = multistep_targets(stack, i, &batch)?;
                (batch, a)
            }
        };
        let row = a
            .iter()
            .enumerate()
            .map(|(k, ak)| ak + frozen_increment(stack, &mut ev, &batch, k, i, &mut z))
            .collect();
        rows.push(row);
    }
    Ok(TargetCache { step: i - 1, rows })
}

/// Mean squared residual and its gradient, written into `grad`.
fn loss_on(problem: &BsdeProblem, p: &Prepared, candidate: &ShallowNet, grad: &mut ParamGradient) -> f64 {
    let d = problem.dim();
    let m = p.base.len();
    let inv_m = 1.0 / m as f64;
    let gen = problem.generator();
    let mut dz = vec![0.0; d];
    grad.fill_zero();
    let mut loss = 0.0;
    for k in 0..m {
        let x = &p.x[k * d..(k + 1) * d];
        let z = &p.z[k * d..(k + 1) * d];
        let u = candidate.value(x);
        let f = gen.eval(p.t, x, u, z);
        let fy = gen.partials(p.t, x, u, z, &mut dz);
        let r = p.base[k] - u + f * p.dt;
        loss += r * r;
        // dr/dθ = −(1 − Δt ∂_y f) ∂U/∂θ
        candidate.accumulate_scalar_grad(x, -2.0 * r * (1.0 - p.dt * fy) * inv_m, grad);
    }
    loss * inv_m
}

/// Empirical loss of `candidate` at step `i` and its exact θ-gradient.
///
/// Steps `i+1..N` of `stack` must be trained; the batch must cover steps `i..=N`.
pub fn dadm_empirical_loss(
    i: usize,
    candidate: &ShallowNet,
    stack: &TrainedStack,
    batch: &PathBatch,
) -> Result<(f64, ParamGradient)> {
    if candidate.input_dim() != stack.problem().dim() || candidate.output_dim() != 1 {
        return Err(contract("candidate must map R^d to R"));
    }
    let p = prepare(stack, i, batch)?;
    let mut grad = ParamGradient::zeros_like(candidate);
    let loss = loss_on(stack.problem(), &p, candidate, &mut grad);
    Ok((loss, grad))
}

/// Trains `U_i` starting from `init`, one batch per iteration.
pub fn train_dadm_step(
    stack: &TrainedStack,
    i: usize,
    init: ShallowNet,
    config: &SolverConfig,
    rng: &StreamRng,
    first: bool,
    losses: &mut Vec<LossRecord>,
) -> Result<(ShallowNet, StepTrace)> {
    train_step(stack, i, init, config, rng, first, losses, None)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    stack: &TrainedStack,
    i: usize,
    init: ShallowNet,
    config: &SolverConfig,
    rng: &StreamRng,
    first: bool,
    losses: &mut Vec<LossRecord>,
    cache: Option<&TargetCache>,
) -> Result<(ShallowNet, StepTrace)> {
    if !stack.trained_from(i + 1) {
        return Err(contract(format!("steps {}..{} must be trained before step {i}", i + 1, stack.n_steps())));
    }
    let problem = stack.problem();
    let mut net = init;
    let mut opt = OptimizerState::new(&config.train, net.param_count());
    let mut grad = ParamGradient::zeros_like(&net);
    let iters = config.train.iterations_for(first);
    let m = config.train.batch_size;
    let mut avg = TailAverage::new(iters, &net, config);
    let trace = run_iterations(iters, i, &mut opt, config, losses, |it, opt| {
        let p = batch_for(stack, i, it, m, rng, cache)?;
        let loss = loss_on(problem, &p, &net, &mut grad);
        if loss.is_finite() {
            update_scalar_net(opt, &mut net, &grad, config)?;
            avg.observe(it, &net);
        }
        Ok(loss)
    })?;
    avg.finish(&mut net, config)?;
    Ok((net, trace))
}

/// Backward induction `i = N−1, …, 0`, warm-starting each step from the one after it.
pub fn solve_dadm(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    config: &SolverConfig,
    rng: &StreamRng,
) -> Result<(SolveResult, TrainedStack)> {
    config.validate()?;
    check_grid(problem, grid)?;
    let start = Instant::now();
    let n = grid.n_steps();
    let d = problem.dim();
    let m = config.train.batch_size;
    let mut losses = Vec::new();
    let (terminal, terminal_ok) = terminal_model_for(problem, grid, config, rng, &mut losses)?;
    let mut stack = TrainedStack::new(problem.clone(), grid.clone(), terminal, ZRule::NextGradient)?;
    let mut step_losses = vec![f64::NAN; n];
    let mut converged = terminal_ok;
    let mut cache: Option<TargetCache> = None;
    if converged {
        for i in (0..n).rev() {
            let init = match stack.net(i + 1) {
                Some(next) => warm_start(next),
                None => ShallowNet::init(d, config.hidden_width(d), 1, config.activation, init_seed(rng, 0))?,
            };
            let (net, trace) = train_step(&stack, i, init, config, rng, i + 1 == n, &mut losses, cache.as_ref())?;
            step_losses[i] = trace.last;
            if trace.diverged {
                converged = false;
                break;
            }
            stack.set_net(i, net)?;
            if i > 0 {
                let keep = config.train.iterations_for(false);
                cache = Some(advance_cache(&stack, i, keep, m, rng, cache.take())?);
            }
        }
    }
    let (y0, z0) = if stack.trained_from(0) {
        (stack.u(0, problem.x0())?, stack.z(0, problem.x0())?)
    } else {
        (f64::NAN, vec![f64::NAN; d])
    };
    let result = SolveResult {
        scheme: Scheme::Dadm,
        y0,
        z0,
        step_losses,
        converged: converged && y0.is_finite(),
        wall_time: start.elapsed(),
        losses,
    };
    Ok((result, stack))
}
