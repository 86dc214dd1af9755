//! Worked examples for the backward schemes and their read-only queries.

use dadm::net::{Activation, ShallowNet};
use dadm::problems::{bounded_example, cosine_heat, linear_terminal, BoundedParams, BsdeProblem};
use dadm::schemes::{
    evaluate_slice, fit_terminal, multistep_target_table, multistep_targets, solve, terminal_model_for, Scheme,
    SolverConfig, TerminalModel, TrainedStack, ZRule,
};
use dadm::sde::{simulate_paths, StreamRng, TimeGrid};
use dadm::TrainConfig;
use proptest::prelude::*;

fn quick(iters: usize, batch: usize) -> SolverConfig {
    SolverConfig {
        train: TrainConfig { iterations: iters, subsequent_iterations: iters, batch_size: batch, ..TrainConfig::default() },
        ..SolverConfig::default()
    }
}

fn random_stack(problem: &BsdeProblem, n: usize, seed: u64) -> TrainedStack {
    let grid = TimeGrid::uniform(n, problem.horizon()).unwrap();
    let d = problem.dim();
    let mut stack = TrainedStack::new(problem.clone(), grid, TerminalModel::Analytic, ZRule::NextGradient).unwrap();
    for j in 0..n {
        stack.set_net(j, ShallowNet::init(d, 5, 1, Activation::Tanh, seed + j as u64).unwrap()).unwrap();
    }
    stack
}

/// `A_i` summed directly from its definition through the public `u`/`z` queries.
fn direct_target(stack: &TrainedStack, i: usize, batch: &dadm::PathBatch, k: usize) -> f64 {
    let p = stack.problem();
    let g = stack.grid();
    let n = stack.n_steps();
    let mut a = p.terminal(batch.state(k, n));
    for j in i + 1..n {
        let x = batch.state(k, j);
        let z = stack.z(j, x).unwrap();
        let u = stack.u(j, x).unwrap();
        let zdw: f64 = z.iter().zip(batch.increment(k, j)).map(|(a, b)| a * b).sum();
        a += p.generator().eval(g.time(j), x, u, &z) * g.dt(j) - zdw;
    }
    a
}

#[test]
fn single_step_grid_regresses_onto_the_terminal_value() {
    let problem = linear_terminal(1, 1.0, 0.0, 1.0, vec![0.3]).unwrap();
    let grid = TimeGrid::uniform(1, 1.0).unwrap();
    for scheme in [Scheme::Dadm, Scheme::Dbdp2] {
        let (res, stack) = solve(scheme, &problem, &grid, &quick(800, 256), &StreamRng::new(5)).unwrap();
        let stack = stack.unwrap();
        assert_eq!(stack.n_steps(), 1);
        assert!(res.converged);
        assert!((res.y0 - 0.3).abs() < 0.1, "{scheme}: {}", res.y0);
    }
}

#[test]
fn backward_accumulator_matches_the_direct_sum() {
    let problem = bounded_example(&BoundedParams::new(2, 1.0)).unwrap();
    let stack = random_stack(&problem, 6, 11);
    let batch = simulate_paths(&problem, stack.grid(), 16, &StreamRng::new(3)).unwrap();
    let table = multistep_target_table(&stack, 0, &batch).unwrap();
    let width = 6;
    for k in 0..16 {
        for i in 0..6 {
            let direct = direct_target(&stack, i, &batch, k);
            assert!((table[k * width + i] - direct).abs() <= 1e-12 * direct.abs().max(1.0), "path {k} step {i}");
        }
    }
    let at2 = multistep_targets(&stack, 2, &batch).unwrap();
    for (k, v) in at2.iter().enumerate() {
        assert!((v - table[k * width + 2]).abs() <= 1e-12 * v.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn accumulator_recursion_holds_for_random_stacks(seed in 0u64..10_000, n in 1usize..6, from_frac in 0.0f64..1.0) {
        let problem = bounded_example(&BoundedParams::new(1, 1.0)).unwrap();
        let stack = random_stack(&problem, n, seed);
        let batch = simulate_paths(&problem, stack.grid(), 4, &StreamRng::new(seed)).unwrap();
        let from = ((n as f64) * from_frac) as usize;
        let table = multistep_target_table(&stack, from, &batch).unwrap();
        let width = n - from;
        for k in 0..4 {
            for i in from..n {
                let direct = direct_target(&stack, i, &batch, k);
                prop_assert!((table[k * width + i - from] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            }
        }
    }
}

#[test]
fn untrained_steps_are_rejected() {
    let problem = cosine_heat(1, 1.0, 0.0, 1.0, vec![0.0]).unwrap();
    let grid = TimeGrid::uniform(3, 1.0).unwrap();
    let stack = TrainedStack::new(problem.clone(), grid.clone(), TerminalModel::Analytic, ZRule::NextGradient).unwrap();
    let batch = simulate_paths(&problem, &grid, 4, &StreamRng::new(1)).unwrap();
    assert!(multistep_targets(&stack, 0, &batch).is_err());
    assert!(evaluate_slice(&stack, 0, &[vec![0.0]]).is_err());
}

#[test]
fn fitted_terminal_gradient_approximates_grad_g() {
    let problem = cosine_heat(1, 1.0, 0.0, 1.0, vec![0.0]).unwrap();
    let grid = TimeGrid::uniform(4, 1.0).unwrap();
    let mut losses = Vec::new();
    let (net, trace) = fit_terminal(&problem, &grid, &quick(1500, 256), &StreamRng::new(2), &mut losses).unwrap();
    assert!(!trace.diverged);
    assert!(trace.last < trace.initial);
    let mut g = [0.0];
    for x in [-1.0, 0.0, 1.0] {
        let v = net.value_and_grad_input(&[x], &mut g);
        assert!((v - f64::cos(x)).abs() < 0.05, "value at {x}: {v}");
        assert!((g[0] + f64::sin(x)).abs() < 0.15, "slope at {x}: {}", g[0]);
    }
    let (model, ok) = terminal_model_for(&problem, &grid, &quick(10, 8), &StreamRng::new(2), &mut losses).unwrap();
    assert!(ok && model == TerminalModel::Analytic);
}

#[test]
fn solve_dispatches_every_scheme() {
    let problem = cosine_heat(1, 0.5, 0.0, 1.0, vec![0.0]).unwrap();
    let grid = TimeGrid::uniform(3, 0.5).unwrap();
    for scheme in Scheme::ALL {
        let (res, stack) = solve(scheme, &problem, &grid, &quick(50, 32), &StreamRng::new(1)).unwrap();
        assert_eq!(res.scheme, scheme);
        assert_eq!(stack.is_none(), scheme == Scheme::DeepBsde);
        assert!(res.y0.is_finite());
    }
}

#[test]
fn slice_rows_carry_the_closed_form() {
    let problem = bounded_example(&BoundedParams::new(1, 2.0)).unwrap();
    let stack = random_stack(&problem, 4, 21);
    let t = stack.grid().time(1);
    let xs: Vec<Vec<f64>> = (0..5).map(|k| vec![-1.0 + 0.5 * k as f64]).collect();
    let rows = evaluate_slice(&stack, 1, &xs).unwrap();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let x = row.x[0];
        assert_eq!(row.u_hat, stack.u(1, &row.x).unwrap());
        assert!((row.u_exact.unwrap() - ((2.0 - t) / 2.0).exp() * x.cos()).abs() < 1e-14);
        assert!((row.z_exact.unwrap()[0] + ((2.0 - t) / 2.0).exp() * x.sin()).abs() < 1e-14);
    }
}

#[test]
fn linear_problem_is_recovered_within_three_standard_errors() {
    // u(0, x0) = x0 + μT = 0.2 + 0.1. With g linear the regression target is exact in
    // expectation, so the estimator error is driven by batch noise only.
    let problem = linear_terminal(1, 1.0, 0.1, 1.0, vec![0.2]).unwrap();
    let grid = TimeGrid::uniform(4, 1.0).unwrap();
    let cfg = quick(600, 256);
    let y0: Vec<f64> = (0..5)
        .map(|s| solve(Scheme::Dadm, &problem, &grid, &cfg, &StreamRng::new(100 + s)).unwrap().0.y0)
        .collect();
    let (mean, std) = dadm::harness::mean_std(&y0);
    let se = std / 5f64.sqrt();
    assert!((mean - 0.3).abs() <= 3.0 * se, "mean {mean}, se {se}, runs {y0:?}");
}
