//! One-step backward schemes. DBDP1 trains separate `U_i` and `Z_i`
//! networks; DBDP2 takes `Z_i = σᵀ D_x U_i` from the network being trained,
//! so its gradient flows through the input derivative.

use std::time::Instant;

use crate::error::{contract, Result};
use crate::net::{ParamGradient, ShallowNet};
use crate::optim::{warm_start, OptimizerState, StepOutcome};
use crate::problems::{sigma_times, sigma_transpose_times, BsdeProblem};
use crate::sde::{simulate_until, PathBatch, StreamRng, TimeGrid};

use super::{
    batch_stream, check_grid, init_seed, run_iterations, update_scalar_net, LossRecord, Scheme, TailAverage,
    SigmaEval, SolveResult, SolverConfig, TerminalModel, TrainedStack, ZRule,
};

fn check(stack: &TrainedStack, i: usize, batch: &PathBatch, u: &ShallowNet) -> Result<()> {
    let d = stack.problem().dim();
    if i >= stack.n_steps() {
        return Err(contract(format!("step {i} is outside 0..{}", stack.n_steps())));
    }
    if batch.grid() != stack.grid() || batch.dim() != d || batch.start_step() > i || batch.end_step() <= i {
        return Err(contract("batch does not cover the requested step"));
    }
    if !stack.trained_from(i + 1) {
        return Err(contract(format!("steps {}..{} must be trained before step {i}", i + 1, stack.n_steps())));
    }
    if u.input_dim() != d || u.output_dim() != 1 {
        return Err(contract("U candidate must map R^d to R"));
    }
    Ok(())
}

/// `Û_{i+1}(X_{i+1})` (or `g(X_N)`) on every path.
fn one_step_targets(stack: &TrainedStack, i: usize, batch: &PathBatch) -> Result<Vec<f64>> {
    (0..batch.n_paths()).map(|k| stack.u(i + 1, batch.state(k, i + 1))).collect()
}

/// DBDP1 loss `(1/M)Σ|Û_{i+1}(X_{i+1}) − U(X_i) + f(t_i, X_i, U, Z)Δt_i − Z(X_i)·ΔW_i|²`
/// with gradients for the `U` and `Z` candidates.
pub fn dbdp1_empirical_loss(
    i: usize,
    u_net: &ShallowNet,
    z_net: &ShallowNet,
    stack: &TrainedStack,
    batch: &PathBatch,
) -> Result<(f64, ParamGradient, ParamGradient)> {
    check(stack, i, batch, u_net)?;
    let d = stack.problem().dim();
    if z_net.input_dim() != d || z_net.output_dim() != d {
        return Err(contract("Z candidate must map R^d to R^d"));
    }
    let targets = one_step_targets(stack, i, batch)?;
    let mut gu = ParamGradient::zeros_like(u_net);
    let mut gz = ParamGradient::zeros_like(z_net);
    let loss = dbdp1_loss_on(stack, i, batch, &targets, u_net, z_net, &mut gu, &mut gz);
    Ok((loss, gu, gz))
}

#[allow(clippy::too_many_arguments)]
fn dbdp1_loss_on(
    stack: &TrainedStack,
    i: usize,
    batch: &PathBatch,
    targets: &[f64],
    u_net: &ShallowNet,
    z_net: &ShallowNet,
    gu: &mut ParamGradient,
    gz: &mut ParamGradient,
) -> f64 {
    let problem = stack.problem();
    let gen = problem.generator();
    let d = problem.dim();
    let (t, dt) = (stack.grid().time(i), stack.grid().dt(i));
    let m = batch.n_paths();
    let inv_m = 1.0 / m as f64;
    let mut z = vec![0.0; d];
    let mut dz = vec![0.0; d];
    let mut up = vec![0.0; d];
    gu.fill_zero();
    gz.fill_zero();
    let mut loss = 0.0;
    for k in 0..m {
        let x = batch.state(k, i);
        let dw = batch.increment(k, i);
        let u = u_net.value(x);
        z_net.forward_into(x, &mut z);
        let f = gen.eval(t, x, u, &z);
        let fy = gen.partials(t, x, u, &z, &mut dz);
        let zdw: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
        let r = targets[k] - u + f * dt - zdw;
        loss += r * r;
        let s = 2.0 * r * inv_m;
        u_net.accumulate_scalar_grad(x, -s * (1.0 - dt * fy), gu);
        // ∂r/∂Z = Δt ∇_z f − ΔW
        for l in 0..d {
            up[l] = dt * dz[l] - dw[l];
        }
        z_net.accumulate_grad_params(x, &up, s, gz);
    }
    loss * inv_m
}

/// DBDP2 loss `(1/M)Σ|Û_{i+1}(X_{i+1}) − U(X_i) + f(t_i, X_i, U, σᵀD_xU)Δt_i − σᵀD_xU(X_i)·ΔW_i|²`
/// and its θ-gradient, including the path through `D_x U`.
pub fn dbdp2_empirical_loss(
    i: usize,
    candidate: &ShallowNet,
    stack: &TrainedStack,
    batch: &PathBatch,
) -> Result<(f64, ParamGradient)> {
    check(stack, i, batch, candidate)?;
    let targets = one_step_targets(stack, i, batch)?;
    let mut g = ParamGradient::zeros_like(candidate);
    let loss = dbdp2_loss_on(stack, i, batch, &targets, candidate, &mut g);
    Ok((loss, g))
}

fn dbdp2_loss_on(
    stack: &TrainedStack,
    i: usize,
    batch: &PathBatch,
    targets: &[f64],
    net: &ShallowNet,
    grad: &mut ParamGradient,
) -> f64 {
    let problem = stack.problem();
    let gen = problem.generator();
    let d = problem.dim();
    let (t, dt) = (stack.grid().time(i), stack.grid().dt(i));
    let m = batch.n_paths();
    let inv_m = 1.0 / m as f64;
    let mut sig = SigmaEval::new(problem);
    let mut gx = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut dz = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut w = vec![0.0; d];
    grad.fill_zero();
    let mut loss = 0.0;
    for k in 0..m {
        let x = batch.state(k, i);
        let dw = batch.increment(k, i);
        let u = net.value_and_grad_input(x, &mut gx);
        let sigma = sig.at(problem, t, x);
        sigma_transpose_times(sigma, &gx, &mut z);
        let f = gen.eval(t, x, u, &z);
        let fy = gen.partials(t, x, u, &z, &mut dz);
        let zdw: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
        let r = targets[k] - u + f * dt - zdw;
        loss += r * r;
        let s = 2.0 * r * inv_m;
        net.accumulate_scalar_grad(x, -s * (1.0 - dt * fy), grad);
        // r depends on D_xU through w·D_xU with w = σ(Δt ∇_z f − ΔW).
        for l in 0..d {
            v[l] = dt * dz[l] - dw[l];
        }
        sigma_times(sigma, &v, &mut w);
        net.accumulate_mixed_grad(x, &w, s, grad);
    }
    loss * inv_m
}

fn finish(
    scheme: Scheme,
    stack: &TrainedStack,
    step_losses: Vec<f64>,
    converged: bool,
    start: Instant,
    losses: Vec<LossRecord>,
) -> Result<SolveResult> {
    let problem = stack.problem();
    let (y0, z0) = if stack.trained_from(0) {
        (stack.u(0, problem.x0())?, stack.z(0, problem.x0())?)
    } else {
        (f64::NAN, vec![f64::NAN; problem.dim()])
    };
    Ok(SolveResult {
        scheme,
        y0,
        z0,
        step_losses,
        converged: converged && y0.is_finite(),
        wall_time: start.elapsed(),
        losses,
    })
}

/// DBDP1 backward induction with warm starts for both networks.
pub fn solve_dbdp1(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    config: &SolverConfig,
    rng: &StreamRng,
) -> Result<(SolveResult, TrainedStack)> {
    config.validate()?;
    check_grid(problem, grid)?;
    let start = Instant::now();
    let (n, d) = (grid.n_steps(), problem.dim());
    let m = config.hidden_width(d);
    let mut stack =
        TrainedStack::new(problem.clone(), grid.clone(), TerminalModel::Analytic, ZRule::Networks(Vec::new()))?;
    let mut losses = Vec::new();
    let mut step_losses = vec![f64::NAN; n];
    let mut converged = true;
    for i in (0..n).rev() {
        let (mut u, mut z) = match (stack.net(i + 1), stack.z_net(i + 1)) {
            (Some(u), Some(z)) => (warm_start(u), warm_start(z)),
            _ => (
                ShallowNet::init(d, m, 1, config.activation, init_seed(rng, 0))?,
                ShallowNet::init(d, m, d, config.activation, init_seed(rng, 1))?,
            ),
        };
        let mut opt = OptimizerState::with_segments(&config.train, &[u.param_count(), z.param_count()]);
        let mut gu = ParamGradient::zeros_like(&u);
        let mut gz = ParamGradient::zeros_like(&z);
        let iters = config.train.iterations_for(i + 1 == n);
        let mut avg_u = TailAverage::new(iters, &u, config);
        let mut avg_z = TailAverage::new(iters, &z, config);
        let trace = run_iterations(iters, i, &mut opt, config, &mut losses, |it, opt| {
            let batch = simulate_until(problem, grid, i + 1, config.train.batch_size, &batch_stream(rng, it))?;
            let targets = one_step_targets(&stack, i, &batch)?;
            let loss = dbdp1_loss_on(&stack, i, &batch, &targets, &u, &z, &mut gu, &mut gz);
            if loss.is_finite() {
                let outcome = opt.step_many(&mut [(u.params_mut(), gu.as_slice()), (z.params_mut(), gz.as_slice())])?;
                if outcome == StepOutcome::Applied {
                    if let Some(c) = &config.theory {
                        u = u.project_weights(c)?;
                    }
                }
                avg_u.observe(it, &u);
                avg_z.observe(it, &z);
            }
            Ok(loss)
        })?;
        avg_u.finish(&mut u, config)?;
        avg_z.finish(&mut z, config)?;
        step_losses[i] = trace.last;
        if trace.diverged {
            converged = false;
            break;
        }
        stack.set_net(i, u)?;
        stack.set_z_net(i, z)?;
    }
    let result = finish(Scheme::Dbdp1, &stack, step_losses, converged, start, losses)?;
    Ok((result, stack))
}

/// DBDP2 backward induction with warm starts.
pub fn solve_dbdp2(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    config: &SolverConfig,
    rng: &StreamRng,
) -> Result<(SolveResult, TrainedStack)> {
    config.validate()?;
    check_grid(problem, grid)?;
    let start = Instant::now();
    let (n, d) = (grid.n_steps(), problem.dim());
    let mut stack = TrainedStack::new(problem.clone(), grid.clone(), TerminalModel::Analytic, ZRule::OwnGradient)?;
    let mut losses = Vec::new();
    let mut step_losses = vec![f64::NAN; n];
    let mut converged = true;
    for i in (0..n).rev() {
        let mut net = match stack.net(i + 1) {
            Some(next) => warm_start(next),
            None => ShallowNet::init(d, config.hidden_width(d), 1, config.activation, init_seed(rng, 0))?,
        };
        let mut opt = OptimizerState::new(&config.train, net.param_count());
        let mut grad = ParamGradient::zeros_like(&net);
        let iters = config.train.iterations_for(i + 1 == n);
        let mut avg = TailAverage::new(iters, &net, config);
        let trace = run_iterations(iters, i, &mut opt, config, &mut losses, |it, opt| {
            let batch = simulate_until(problem, grid, i + 1, config.train.batch_size, &batch_stream(rng, it))?;
            let targets = one_step_targets(&stack, i, &batch)?;
            let loss = dbdp2_loss_on(&stack, i, &batch, &targets, &net, &mut grad);
            if loss.is_finite() {
                update_scalar_net(opt, &mut net, &grad, config)?;
                avg.observe(it, &net);
            }
            Ok(loss)
        })?;
        avg.finish(&mut net, config)?;
        step_losses[i] = trace.last;
        if trace.diverged {
            converged = false;
            break;
        }
        stack.set_net(i, net)?;
    }
    let result = finish(Scheme::Dbdp2, &stack, step_losses, converged, start, losses)?;
    Ok((result, stack))
}
