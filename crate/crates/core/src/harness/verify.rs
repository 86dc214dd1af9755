//! The `verify` suite: gradient, derivative-bound, PDE-residual and quadrature checks
//! that run before any benchmark.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::Result;
use crate::net::{Activation, ShallowNet, WeightConstraint};
use crate::problems::{bounded_example, cosine_heat, pde_residual, unbounded_example, BoundedParams, BsdeProblem, UnboundedParams};
use crate::schemes::{
    dadm_empirical_loss, dbdp1_empirical_loss, dbdp2_empirical_loss, deep_bsde_loss, DeepBsdeModel, SolverConfig,
    TerminalModel, TrainedStack, ZRule,
};
use crate::sde::{simulate_paths, StreamRng, TimeGrid};
use crate::validation::{central_range, conditional_expectation_oracle, derivative_bound_check, finite_diff_check};

/// Relative tolerance of every analytic gradient against central differences.
pub const GRAD_REL_TOL: f64 = 1e-5;
/// Central-difference step in parameter space.
pub const GRAD_FD_STEP: f64 = 1e-5;
/// Absolute tolerance of the PDE residual of a closed-form solution.
pub const RESIDUAL_TOL: f64 = 1e-4;

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    /// Worst observed statistic.
    pub value: f64,
    pub threshold: f64,
}

impl CheckLine {
    fn new(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: value <= threshold, value, threshold }
    }

    pub fn render(&self) -> String {
        format!(
            "{} {}: {:.3e} (threshold {:.3e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold
        )
    }
}

/// Shape of the tiny gradient-check instances.
#[derive(Debug, Clone, Copy)]
pub struct TinyInstance {
    pub dim: usize,
    pub hidden: usize,
    pub batch: usize,
    pub steps: usize,
}

impl Default for TinyInstance {
    fn default() -> Self {
        Self { dim: 1, hidden: 3, batch: 8, steps: 3 }
    }
}

fn tiny_problem(dim: usize) -> Result<BsdeProblem> {
    bounded_example(&BoundedParams::new(dim, 1.0))
}

fn random_net(d: usize, m: usize, out: usize, seed: u64) -> Result<ShallowNet> {
    ShallowNet::init(d, m, out, Activation::Tanh, seed)
}

/// Stack on the tiny instance with random networks at steps `1..N`.
fn tiny_stack(problem: &BsdeProblem, grid: &TimeGrid, inst: TinyInstance, rule: ZRule, seed: u64) -> Result<TrainedStack> {
    let d = problem.dim();
    let with_z = matches!(rule, ZRule::Networks(_));
    let mut stack = TrainedStack::new(problem.clone(), grid.clone(), TerminalModel::Analytic, rule)?;
    for j in 1..inst.steps {
        stack.set_net(j, random_net(d, inst.hidden, 1, seed + j as u64)?)?;
        if with_z {
            stack.set_z_net(j, random_net(d, inst.hidden, d, seed + 100 + j as u64)?)?;
        }
    }
    Ok(stack)
}

/// Finite-difference checks of the four scheme losses at step 0 of a tiny instance.
pub fn gradient_checks(inst: TinyInstance, seed: u64) -> Result<Vec<CheckLine>> {
    let problem = tiny_problem(inst.dim)?;
    let grid = TimeGrid::uniform(inst.steps, problem.horizon())?;
    let batch = simulate_paths(&problem, &grid, inst.batch, &StreamRng::new(seed))?;
    let (d, m) = (inst.dim, inst.hidden);
    let mut lines = Vec::new();
    let name = |s: &str| format!("gradient {s} (d={d}, m={m}, M={}, N={})", inst.batch, inst.steps);

    let stack = tiny_stack(&problem, &grid, inst, ZRule::NextGradient, seed)?;
    let cand = random_net(d, m, 1, seed + 50)?;
    let rep = finite_diff_check(
        |p| {
            let mut net = cand.clone();
            net.params_mut().copy_from_slice(p);
            dadm_empirical_loss(0, &net, &stack, &batch).map(|(l, g)| (l, g.into_vec()))
        },
        cand.params(),
        GRAD_FD_STEP,
    )?;
    lines.push(CheckLine::new(name("dadm"), rep.max_rel, GRAD_REL_TOL));

    let stack = tiny_stack(&problem, &grid, inst, ZRule::Networks(Vec::new()), seed)?;
    let z_cand = random_net(d, m, d, seed + 51)?;
    let nu = cand.param_count();
    let joint: Vec<f64> = cand.params().iter().chain(z_cand.params()).copied().collect();
    let rep = finite_diff_check(
        |p| {
            let mut u = cand.clone();
            let mut z = z_cand.clone();
            u.params_mut().copy_from_slice(&p[..nu]);
            z.params_mut().copy_from_slice(&p[nu..]);
            dbdp1_empirical_loss(0, &u, &z, &stack, &batch).map(|(l, gu, gz)| {
                let mut g = gu.into_vec();
                g.extend(gz.into_vec());
                (l, g)
            })
        },
        &joint,
        GRAD_FD_STEP,
    )?;
    lines.push(CheckLine::new(name("dbdp1"), rep.max_rel, GRAD_REL_TOL));

    let stack = tiny_stack(&problem, &grid, inst, ZRule::OwnGradient, seed)?;
    let rep = finite_diff_check(
        |p| {
            let mut net = cand.clone();
            net.params_mut().copy_from_slice(p);
            dbdp2_empirical_loss(0, &net, &stack, &batch).map(|(l, g)| (l, g.into_vec()))
        },
        cand.params(),
        GRAD_FD_STEP,
    )?;
    lines.push(CheckLine::new(name("dbdp2"), rep.max_rel, GRAD_REL_TOL));

    let config = SolverConfig { hidden: Some(m), ..SolverConfig::default() };
    let model = DeepBsdeModel::init(&problem, inst.steps, &config, &StreamRng::new(seed + 52))?;
    let sizes: Vec<usize> = std::iter::once(&model.u0).chain(&model.z_nets).map(ShallowNet::param_count).collect();
    let flat: Vec<f64> = std::iter::once(&model.u0).chain(&model.z_nets).flat_map(|n| n.params().to_vec()).collect();
    let rep = finite_diff_check(
        |p| {
            let mut mdl = model.clone();
            let mut off = 0;
            for (net, &len) in std::iter::once(&mut mdl.u0).chain(mdl.z_nets.iter_mut()).zip(&sizes) {
                net.params_mut().copy_from_slice(&p[off..off + len]);
                off += len;
            }
            deep_bsde_loss(&mdl, &problem, &batch).map(|(l, gs)| (l, gs.into_iter().flat_map(|g| g.into_vec()).collect()))
        },
        &flat,
        GRAD_FD_STEP,
    )?;
    lines.push(CheckLine::new(name("deepbsde"), rep.max_rel, GRAD_REL_TOL));
    Ok(lines)
}

/// Projects `n_nets` random tanh networks with inflated weights onto the constrained
/// class and reports the largest `sup|D_x U|` relative to the bound `γ² sup|ρ'|`.
pub fn derivative_bound_suite(n_nets: usize, gamma: f64, n_probes: usize, seed: u64) -> Result<CheckLine> {
    let constraint = WeightConstraint::new(gamma)?;
    let mut rng = StreamRng::new(seed).rng();
    let mut failures = 0usize;
    let mut worst_ratio = 0.0f64;
    for k in 0..n_nets {
        let d = rng.random_range(1..=4usize);
        let m = rng.random_range(2..=16usize);
        let mut net = random_net(d, m, 1, seed.wrapping_add(1 + k as u64))?;
        let scale = rng.random_range(1.0..10.0);
        net.params_mut().iter_mut().for_each(|v| *v *= scale);
        let projected = net.project_weights(&constraint)?;
        let check = derivative_bound_check(&projected, &constraint, n_probes, seed.wrapping_add(1000 + k as u64))?;
        failures += usize::from(!check.holds);
        worst_ratio = worst_ratio.max(check.worst / check.bound);
    }
    let mut line = CheckLine::new(
        format!("derivative bound ({n_nets} nets, gamma={gamma}, {n_probes} probes, worst |DU|/bound={worst_ratio:.4})"),
        failures as f64,
        0.0,
    );
    line.passed = failures == 0;
    Ok(line)
}

/// `|residual|` of both benchmark solutions at `n_points` random points away from
/// the kink of the unbounded example.
pub fn residual_gate(dims: &[usize], n_points: usize, seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    for &d in dims {
        let problems = [bounded_example(&BoundedParams::new(d, 1.0))?, unbounded_example(&UnboundedParams::new(d, 1.0))?];
        for p in &problems {
            let mut rng = StreamRng::new(seed + d as u64).rng();
            let mut worst = 0.0f64;
            let mut taken = 0;
            while taken < n_points {
                let t = rng.random_range(0.05..0.95) * p.horizon();
                let x: Vec<f64> = p.x0().iter().map(|v| v + rng.random_range(-1.5..1.5)).collect();
                if x.iter().any(|v| v.abs() < 1e-2) {
                    continue;
                }
                worst = worst.max(pde_residual(p, t, &x, 1e-4)?.value.abs());
                taken += 1;
            }
            lines.push(CheckLine::new(format!("pde residual {} d={d} ({n_points} points)", p.name()), worst, RESIDUAL_TOL));
        }
    }
    Ok(lines)
}

/// Gauss–Hermite conditional expectations against `e^{−(T−t_i)/2} cos x` on the heat problem.
pub fn quadrature_check(n_steps: usize) -> Result<CheckLine> {
    let problem = cosine_heat(1, 1.0, 0.0, 1.0, vec![0.0])?;
    let grid = TimeGrid::uniform(n_steps, 1.0)?;
    let mut worst = 0.0f64;
    for i in 0..n_steps {
        let (lo, hi) = central_range(&problem, &grid, i, 0.9)?;
        for k in 0..=20 {
            let x = lo + (hi - lo) * k as f64 / 20.0;
            let exact = (-(1.0 - grid.time(i)) / 2.0).exp() * x.cos();
            worst = worst.max((conditional_expectation_oracle(&problem, &grid, i, x)? - exact).abs());
        }
    }
    Ok(CheckLine::new(format!("gauss-hermite oracle (N={n_steps})"), worst, 1e-10))
}

/// Runs every check with its acceptance settings.
pub fn run_suite(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = gradient_checks(TinyInstance::default(), seed)?;
    lines.push(derivative_bound_suite(100, 2.0, 10_000, seed)?);
    lines.extend(residual_gate(&[1, 3], 50, seed)?);
    lines.push(quadrature_check(20)?);
    Ok(lines)
}

/// Writes `check,passed,value,threshold`.
pub fn write_summary(lines: &[CheckLine], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "check,passed,value,threshold")?;
    for l in lines {
        writeln!(w, "\"{}\",{},{:e},{:e}", l.name.replace('"', "'"), l.passed, l.value, l.threshold)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_on_tiny_instances() {
        for line in gradient_checks(TinyInstance::default(), 3).unwrap() {
            assert!(line.passed, "{}", line.render());
        }
        let wider = TinyInstance { dim: 2, hidden: 4, batch: 5, steps: 2 };
        for line in gradient_checks(wider, 9).unwrap() {
            assert!(line.passed, "{}", line.render());
        }
    }

    #[test]
    fn projected_nets_respect_the_bound() {
        let line = derivative_bound_suite(10, 2.0, 500, 1).unwrap();
        assert!(line.passed, "{}", line.render());
    }

    #[test]
    fn residual_and_quadrature_checks_pass() {
        for line in residual_gate(&[1, 2], 10, 4).unwrap() {
            assert!(line.passed, "{}", line.render());
        }
        assert!(quadrature_check(5).unwrap().passed);
    }
}
