//! Network fit of the terminal condition, for problems without an analytic `∇g`.

use crate::error::Result;
use crate::net::{ParamGradient, ShallowNet};
use crate::optim::OptimizerState;
use crate::problems::BsdeProblem;
use crate::sde::{simulate_paths, StreamRng, TimeGrid};

use super::{init_seed, run_iterations, update_scalar_net, LossRecord, SolverConfig, StepTrace, TailAverage, TerminalModel};

/// Fits `g̃ ≈ g` by minimising `E|g̃(X_N) − g(X_N)|²` over fresh Euler samples of `X_N`.
pub fn fit_terminal(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    config: &SolverConfig,
    rng: &StreamRng,
    losses: &mut Vec<LossRecord>,
) -> Result<(ShallowNet, StepTrace)> {
    config.validate()?;
    super::check_grid(problem, grid)?;
    let d = problem.dim();
    let n = grid.n_steps();
    let rng = rng.derive(super::TAG_TERMINAL);
    let mut net = ShallowNet::init(d, config.hidden_width(d), 1, config.activation, init_seed(&rng, 0))?;
    let mut opt = OptimizerState::new(&config.train, net.param_count());
    let mut grad = ParamGradient::zeros_like(&net);
    let m = config.train.batch_size;
    let inv_m = 1.0 / m as f64;
    let mut avg = TailAverage::new(config.train.iterations, &net, config);
    let trace = run_iterations(config.train.iterations, n, &mut opt, config, losses, |it, opt| {
        let batch = simulate_paths(problem, grid, m, &rng.derive(it as u64))?;
        grad.fill_zero();
        let mut loss = 0.0;
        for k in 0..m {
            let x = batch.state(k, n);
            let r = net.value(x) - problem.terminal(x);
            loss += r * r;
            net.accumulate_scalar_grad(x, 2.0 * r * inv_m, &mut grad);
        }
        loss *= inv_m;
        if loss.is_finite() {
            update_scalar_net(opt, &mut net, &grad, config)?;
            avg.observe(it, &net);
        }
        Ok(loss)
    })?;
    avg.finish(&mut net, config)?;
    Ok((net, trace))
}

/// Analytic `∇g` when the problem has one, otherwise a fitted network.
/// The flag is `false` if the fit diverged.
pub fn terminal_model_for(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    config: &SolverConfig,
    rng: &StreamRng,
    losses: &mut Vec<LossRecord>,
) -> Result<(TerminalModel, bool)> {
    if problem.has_terminal_grad() {
        return Ok((TerminalModel::Analytic, true));
    }
    let (net, trace) = fit_terminal(problem, grid, config, rng, losses)?;
    Ok((TerminalModel::Fitted(net), !trace.diverged))
}
