//! Global forward scheme: `Y_0 = U_0(x0)`, `Y_{i+1} = Y_i − f(t_i, X_i, Y_i, Z_i(X_i))Δt_i + Z_i(X_i)·ΔW_i`,
//! all networks trained together on `E|Y_N − g(X_N)|²`.

use std::time::Instant;

use crate::error::{contract, Result};
use crate::net::{ParamGradient, ShallowNet};
use crate::optim::{OptimizerState, StepOutcome};
use crate::problems::BsdeProblem;
use crate::sde::{simulate_paths, PathBatch, StreamRng, TimeGrid};

use super::{batch_stream, check_grid, init_seed, run_iterations, Scheme, SolveResult, SolverConfig, TailAverage};

/// `U_0` (evaluated at `x0` only) and one `d → d` network per step for `Z_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepBsdeModel {
    pub u0: ShallowNet,
    pub z_nets: Vec<ShallowNet>,
}

impl DeepBsdeModel {
    pub fn init(problem: &BsdeProblem, n_steps: usize, config: &SolverConfig, rng: &StreamRng) -> Result<Self> {
        let d = problem.dim();
        let m = config.hidden_width(d);
        let u0 = ShallowNet::init(d, m, 1, config.activation, init_seed(rng, 0))?;
        let z_nets = (0..n_steps)
            .map(|i| ShallowNet::init(d, m, d, config.activation, init_seed(rng, 1 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { u0, z_nets })
    }

    fn zero_grads(&self) -> Vec<ParamGradient> {
        std::iter::once(&self.u0).chain(&self.z_nets).map(ParamGradient::zeros_like).collect()
    }
}

/// Global loss and gradients (index 0 for `U_0`, `1 + i` for `Z_i`).
pub fn deep_bsde_loss(
    model: &DeepBsdeModel,
    problem: &BsdeProblem,
    batch: &PathBatch,
) -> Result<(f64, Vec<ParamGradient>)> {
    let n = batch.grid().n_steps();
    let d = problem.dim();
    if batch.start_step() != 0 || batch.end_step() != n || model.z_nets.len() != n || batch.dim() != d {
        return Err(contract("model, problem and batch disagree on steps or dimension"));
    }
    if model.u0.input_dim() != d || model.u0.output_dim() != 1 {
        return Err(contract("U_0 must map R^d to R"));
    }
    if model.z_nets.iter().any(|z| z.input_dim() != d || z.output_dim() != d) {
        return Err(contract("Z networks must map R^d to R^d"));
    }
    let mut grads = model.zero_grads();
    let loss = loss_on(model, problem, batch, &mut grads);
    Ok((loss, grads))
}

fn loss_on(model: &DeepBsdeModel, problem: &BsdeProblem, batch: &PathBatch, grads: &mut [ParamGradient]) -> f64 {
    let grid = batch.grid();
    let n = grid.n_steps();
    let d = problem.dim();
    let m = batch.n_paths();
    let inv_m = 1.0 / m as f64;
    let gen = problem.generator();
    let y0 = model.u0.value(problem.x0());
    let mut ys = vec![0.0; n];
    let mut zs = vec![0.0; n * d];
    let mut dz = vec![0.0; d];
    let mut up = vec![0.0; d];
    let mut lambda0 = 0.0;
    let mut loss = 0.0;
    grads.iter_mut().for_each(|g| g.fill_zero());
    for k in 0..m {
        let mut y = y0;
        for i in 0..n {
            let x = batch.state(k, i);
            let z = &mut zs[i * d..(i + 1) * d];
            model.z_nets[i].forward_into(x, z);
            ys[i] = y;
            let zdw: f64 = z.iter().zip(batch.increment(k, i)).map(|(a, b)| a * b).sum();
            y += -gen.eval(grid.time(i), x, y, z) * grid.dt(i) + zdw;
        }
        let r = y - problem.terminal(batch.state(k, n));
        loss += r * r;
        // Adjoint of the forward recursion.
        let mut lambda = 2.0 * r * inv_m;
        for i in (0..n).rev() {
            let x = batch.state(k, i);
            let z = &zs[i * d..(i + 1) * d];
            let dt = grid.dt(i);
            let fy = gen.partials(grid.time(i), x, ys[i], z, &mut dz);
            for (l, dw) in batch.increment(k, i).iter().enumerate() {
                up[l] = -dt * dz[l] + dw;
            }
            model.z_nets[i].accumulate_grad_params(x, &up, lambda, &mut grads[1 + i]);
            lambda *= 1.0 - dt * fy;
        }
        lambda0 += lambda;
    }
    model.u0.accumulate_scalar_grad(problem.x0(), lambda0, &mut grads[0]);
    loss * inv_m
}

/// Trains the model for `config.train.iterations` joint updates.
pub fn solve_deep_bsde(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    config: &SolverConfig,
    rng: &StreamRng,
) -> Result<(SolveResult, DeepBsdeModel)> {
    config.validate()?;
    check_grid(problem, grid)?;
    let start = Instant::now();
    let n = grid.n_steps();
    let mut model = DeepBsdeModel::init(problem, n, config, rng)?;
    let mut grads = model.zero_grads();
    let lengths: Vec<usize> = grads.iter().map(|g| g.len()).collect();
    let mut opt = OptimizerState::with_segments(&config.train, &lengths);
    let mut losses = Vec::new();
    let iters = config.train.iterations;
    let mut avg: Vec<TailAverage> =
        std::iter::once(&model.u0).chain(&model.z_nets).map(|n| TailAverage::new(iters, n, config)).collect();
    let trace = run_iterations(iters, 0, &mut opt, config, &mut losses, |it, opt| {
        let batch = simulate_paths(problem, grid, config.train.batch_size, &batch_stream(rng, it))?;
        let loss = loss_on(&model, problem, &batch, &mut grads);
        if loss.is_finite() {
            let mut parts: Vec<(&mut [f64], &[f64])> = std::iter::once(model.u0.params_mut())
                .chain(model.z_nets.iter_mut().map(|z| z.params_mut()))
                .zip(grads.iter().map(|g| g.as_slice()))
                .collect();
            if opt.step_many(&mut parts)? == StepOutcome::Applied {
                if let Some(c) = &config.theory {
                    model.u0 = model.u0.project_weights(c)?;
                }
                for (a, n) in avg.iter_mut().zip(std::iter::once(&model.u0).chain(&model.z_nets)) {
                    a.observe(it, n);
                }
            }
        }
        Ok(loss)
    })?;
    let mut avg = avg.into_iter();
    avg.next().expect("u0 average").finish(&mut model.u0, config)?;
    for (a, n) in avg.zip(model.z_nets.iter_mut()) {
        a.finish(n, config)?;
    }
    let x0 = problem.x0();
    let y0 = model.u0.value(x0);
    let z0 = model.z_nets[0].forward(x0)?;
    let converged = !trace.diverged && y0.is_finite();
    let result = SolveResult {
        scheme: Scheme::DeepBsde,
        y0,
        z0,
        step_losses: vec![trace.last],
        converged,
        wall_time: start.elapsed(),
        losses,
    };
    Ok((result, model))
}
