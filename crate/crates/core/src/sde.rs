//! Time grids, reproducible Gaussian streams and Euler–Maruyama paths.
//!
//! Every sample path `k` draws its increments from its own ChaCha stream keyed
//! by `(seed, k)`, so a batch is the same no matter how (or whether) the work
//! is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};
use crate::problems::BsdeProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    steps: Vec<f64>,
}

impl TimeGrid {
    /// `N + 1` points with `Δt_i = T / N` exactly.
    pub fn uniform(n: usize, horizon: f64) -> Result<Self> {
        if n == 0 {
            return Err(contract("a time grid needs at least one step"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(contract(format!("horizon must be positive, got {horizon}")));
        }
        let h = horizon / n as f64;
        let mut times: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
        times[n] = horizon;
        Ok(Self { times, steps: vec![h; n] })
    }

    /// Arbitrary strictly increasing grid starting at 0.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(contract("a time grid needs at least two points"));
        }
        if times[0] != 0.0 {
            return Err(contract("time grids start at t = 0"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(contract("grid times must be finite and strictly increasing"));
        }
        let steps = times.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { times, steps })
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    #[inline]
    pub fn dt(&self, i: usize) -> f64 {
        self.steps[i]
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// `|π| = max_i Δt_i`.
    pub fn mesh(&self) -> f64 {
        self.steps.iter().cloned().fold(0.0, f64::max)
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splittable seed. `derive` produces statistically independent children;
/// `path_rng(k)` opens the stream for sample `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamRng {
    seed: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, tag: u64) -> StreamRng {
        StreamRng { seed: splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d))) }
    }

    pub fn path_rng(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }

    /// A general-purpose generator for non-path draws (initialisation, probes).
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ 0x0dd_ba11))
    }
}

/// Euler states and Brownian increments for `M` paths over steps `start..=end`.
///
/// Path `k` of a batch ending before `N` is a prefix of the same path
/// simulated to `N` with the same stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    start: usize,
    end: usize,
    seed: u64,
    /// `[k][j - start][l]`, `j ∈ start..=end`.
    states: Vec<f64>,
    /// `[k][j - start][l]`, `j ∈ start..end`.
    increments: Vec<f64>,
}

impl PathBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// First time index covered by the batch.
    pub fn start_step(&self) -> usize {
        self.start
    }

    /// Last time index covered by the batch.
    pub fn end_step(&self) -> usize {
        self.end
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    fn n_points(&self) -> usize {
        self.end - self.start + 1
    }

    /// `X_j` of path `k`.
    #[inline]
    pub fn state(&self, k: usize, j: usize) -> &[f64] {
        debug_assert!(j >= self.start && j <= self.end);
        let off = (k * self.n_points() + (j - self.start)) * self.dim;
        &self.states[off..off + self.dim]
    }

    /// `ΔW_j` of path `k`.
    #[inline]
    pub fn increment(&self, k: usize, j: usize) -> &[f64] {
        debug_assert!(j >= self.start && j < self.end);
        let off = (k * (self.n_points() - 1) + (j - self.start)) * self.dim;
        &self.increments[off..off + self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Re-runs the Euler recursion from the stored increments.
    pub fn replay(&self, problem: &BsdeProblem) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.states.len()];
        let n_pts = self.n_points();
        let mut euler = EulerStepper::new(problem);
        for k in 0..self.n_paths {
            let base = k * n_pts * self.dim;
            out[base..base + self.dim].copy_from_slice(self.state(k, self.start));
            for j in self.start..self.end {
                let cur = base + (j - self.start) * self.dim;
                let (head, tail) = out.split_at_mut(cur + self.dim);
                euler.step(&self.grid, j, &head[cur..], self.increment(k, j), &mut tail[..self.dim])?;
            }
        }
        Ok(out)
    }
}

struct EulerStepper<'a> {
    problem: &'a BsdeProblem,
    drift: Vec<f64>,
    sigma: Vec<f64>,
    constant_sigma: bool,
}

impl<'a> EulerStepper<'a> {
    fn new(problem: &'a BsdeProblem) -> Self {
        let d = problem.dim();
        let mut sigma = vec![0.0; d * d];
        let constant_sigma = if let Some(m) = problem.diffusion().constant() {
            sigma.copy_from_slice(m);
            true
        } else {
            false
        };
        Self { problem, drift: vec![0.0; d], sigma, constant_sigma }
    }

    /// `X_{j+1} = X_j + b(t_j, X_j) Δt_j + σ(t_j, X_j) ΔW_j`.
    #[inline]
    fn step(&mut self, grid: &TimeGrid, j: usize, x: &[f64], dw: &[f64], next: &mut [f64]) -> Result<()> {
        let d = x.len();
        let t = grid.time(j);
        let dt = grid.dt(j);
        self.problem.drift().eval(t, x, &mut self.drift);
        if !self.constant_sigma {
            self.problem.diffusion().eval(t, x, &mut self.sigma);
        }
        for l in 0..d {
            let row = &self.sigma[l * d..(l + 1) * d];
            let diff: f64 = row.iter().zip(dw).map(|(s, w)| s * w).sum();
            next[l] = x[l] + self.drift[l] * dt + diff;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation { step: j + 1 });
        }
        Ok(())
    }
}

/// Paths of the Euler scheme started at `X_0 = x0`.
pub fn simulate_paths(problem: &BsdeProblem, grid: &TimeGrid, n_paths: usize, rng: &StreamRng) -> Result<PathBatch> {
    simulate_until(problem, grid, grid.n_steps(), n_paths, rng)
}

/// Paths from `X_0 = x0` up to step `end ≤ N`.
pub fn simulate_until(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    end: usize,
    n_paths: usize,
    rng: &StreamRng,
) -> Result<PathBatch> {
    simulate_segment(problem, grid, 0, end, problem.x0(), n_paths, rng)
}

/// Euler flow restarted at `X_i = x` over steps `i..=N`.
pub fn flow_from(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    start: usize,
    x: &[f64],
    n_paths: usize,
    rng: &StreamRng,
) -> Result<PathBatch> {
    simulate_segment(problem, grid, start, grid.n_steps(), x, n_paths, rng)
}

fn simulate_segment(
    problem: &BsdeProblem,
    grid: &TimeGrid,
    start: usize,
    end: usize,
    x: &[f64],
    n_paths: usize,
    rng: &StreamRng,
) -> Result<PathBatch> {
    let d = problem.dim();
    let n = grid.n_steps();
    if end > n || start >= end {
        return Err(contract(format!("segment {start}..={end} is not a valid part of 0..={n}")));
    }
    if x.len() != d {
        return Err(contract("start point has wrong dimension"));
    }
    if n_paths == 0 {
        return Err(contract("at least one path is required"));
    }
    if (grid.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon().max(1.0) {
        return Err(contract("grid horizon does not match problem horizon"));
    }
    let n_pts = end - start + 1;
    let mut states = vec![0.0; n_paths * n_pts * d];
    let mut increments = vec![0.0; n_paths * (n_pts - 1) * d];
    let mut euler = EulerStepper::new(problem);
    for k in 0..n_paths {
        let mut prng = rng.path_rng(k as u64);
        let sbase = k * n_pts * d;
        let ibase = k * (n_pts - 1) * d;
        states[sbase..sbase + d].copy_from_slice(x);
        for j in start..end {
            let sq = grid.dt(j).sqrt();
            let inc = &mut increments[ibase + (j - start) * d..ibase + (j - start + 1) * d];
            for w in inc.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut prng);
                *w = sq * z;
            }
            let cur = sbase + (j - start) * d;
            let (head, tail) = states.split_at_mut(cur + d);
            euler.step(grid, j, &head[cur..], inc, &mut tail[..d])?;
        }
    }
    Ok(PathBatch { grid: grid.clone(), dim: d, n_paths, start, end, seed: rng.seed(), states, increments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{bounded_example, BoundedParams, Diffusion, Drift};
    use std::sync::Arc;

    fn frozen(d: usize, mu: f64, t_end: f64) -> BsdeProblem {
        BsdeProblem::builder("frozen", d, t_end, vec![0.5; d])
            .constant_drift(vec![mu; d])
            .terminal(Arc::new(|x| x[0]))
            .build()
            .unwrap()
    }

    fn brownian(d: usize, t_end: f64) -> BsdeProblem {
        BsdeProblem::builder("bm", d, t_end, vec![0.0; d])
            .scaled_identity_diffusion(1.0)
            .terminal(Arc::new(|x| x[0]))
            .build()
            .unwrap()
    }

    #[test]
    fn uniform_grid_examples() {
        let g = TimeGrid::uniform(1, 2.0).unwrap();
        assert_eq!(g.times(), &[0.0, 2.0]);
        let g = TimeGrid::uniform(4, 1.0).unwrap();
        assert!(g.steps().iter().all(|&s| s == 0.25));
        assert_eq!(g.mesh(), 0.25);
        let g = TimeGrid::uniform(180, 2.0).unwrap();
        assert!((g.dt(0) - 1.0 / 90.0).abs() < 1e-15);
        assert!((g.time(1) - 0.011111).abs() < 1e-6);
        assert_eq!(g.horizon(), 2.0);
        assert!(TimeGrid::uniform(0, 1.0).is_err());
        assert!(TimeGrid::uniform(3, 0.0).is_err());
        assert!(TimeGrid::uniform(3, -1.0).is_err());
    }

    #[test]
    fn nonuniform_grid_validation() {
        let g = TimeGrid::from_times(vec![0.0, 0.1, 0.5, 1.0]).unwrap();
        assert_eq!(g.n_steps(), 3);
        assert!((g.mesh() - 0.5).abs() < 1e-15);
        assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_times(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn frozen_dynamics_stay_at_start() {
        let p = frozen(2, 0.0, 1.0);
        let g = TimeGrid::uniform(5, 1.0).unwrap();
        let b = simulate_paths(&p, &g, 7, &StreamRng::new(1)).unwrap();
        for k in 0..7 {
            for j in 0..=5 {
                assert_eq!(b.state(k, j), &[0.5, 0.5]);
            }
        }
    }

    #[test]
    fn deterministic_drift_reaches_x0_plus_mu_t() {
        let p = frozen(1, 0.25, 2.0);
        let g = TimeGrid::uniform(8, 2.0).unwrap();
        let b = simulate_paths(&p, &g, 3, &StreamRng::new(1)).unwrap();
        for k in 0..3 {
            assert_eq!(b.state(k, 8), &[0.5 + 0.25 * 2.0]);
        }
    }

    #[test]
    fn bounded_example_terminal_moments() {
        let p = bounded_example(&BoundedParams::new(1, 2.0)).unwrap();
        let g = TimeGrid::uniform(10, 2.0).unwrap();
        let m = 100_000;
        let b = simulate_paths(&p, &g, m, &StreamRng::new(2024)).unwrap();
        let xs: Vec<f64> = (0..m).map(|k| b.state(k, 10)[0]).collect();
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let se = (2.0 / m as f64).sqrt();
        assert!((mean - 1.4).abs() < 3.0 * se, "mean {mean}");
        assert!((var - 2.0).abs() < 0.05 * 2.0, "var {var}");
    }

    #[test]
    fn flow_from_last_step_with_frozen_dynamics() {
        let p = frozen(1, 0.0, 1.0);
        let g = TimeGrid::uniform(4, 1.0).unwrap();
        let b = flow_from(&p, &g, 3, &[2.5], 5, &StreamRng::new(9)).unwrap();
        for k in 0..5 {
            assert_eq!(b.state(k, 4), &[2.5]);
        }
        assert!(flow_from(&p, &g, 4, &[2.5], 5, &StreamRng::new(9)).is_err());
    }

    #[test]
    fn flow_from_zero_equals_simulate_paths() {
        let p = bounded_example(&BoundedParams::new(2, 1.0)).unwrap();
        let g = TimeGrid::uniform(6, 1.0).unwrap();
        let r = StreamRng::new(77);
        let a = simulate_paths(&p, &g, 20, &r).unwrap();
        let b = flow_from(&p, &g, 0, p.x0(), 20, &r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flow_variance_over_remaining_time() {
        let p = brownian(1, 1.0);
        let g = TimeGrid::uniform(10, 1.0).unwrap();
        let m = 100_000;
        let b = flow_from(&p, &g, 5, &[0.0], m, &StreamRng::new(5)).unwrap();
        let var = (0..m).map(|k| b.state(k, 10)[0].powi(2)).sum::<f64>() / m as f64;
        assert!((var - 0.5).abs() < 0.05 * 0.5, "var {var}");
    }

    #[test]
    fn increment_moments() {
        let d = 2;
        let p = brownian(d, 1.0);
        let g = TimeGrid::uniform(4, 1.0).unwrap();
        let m = 100_000;
        let b = simulate_paths(&p, &g, m, &StreamRng::new(99)).unwrap();
        for i in 0..4 {
            let dt = g.dt(i);
            let mut mean = [0.0; 2];
            let mut cov = [[0.0; 2]; 2];
            for k in 0..m {
                let w = b.increment(k, i);
                for a in 0..d {
                    mean[a] += w[a];
                    for c in 0..d {
                        cov[a][c] += w[a] * w[c];
                    }
                }
            }
            for a in 0..d {
                mean[a] /= m as f64;
                assert!(mean[a].abs() < 4.0 * (dt / m as f64).sqrt());
                for c in 0..d {
                    let v = cov[a][c] / m as f64;
                    let target = if a == c { dt } else { 0.0 };
                    assert!((v - target).abs() < 0.05 * dt, "cov[{a}][{c}] = {v}");
                }
            }
        }
    }

    #[test]
    fn replay_is_bitwise_and_seeds_are_deterministic() {
        let p = bounded_example(&BoundedParams::new(3, 1.0)).unwrap();
        let g = TimeGrid::uniform(12, 1.0).unwrap();
        let a = simulate_paths(&p, &g, 50, &StreamRng::new(3)).unwrap();
        assert_eq!(a.replay(&p).unwrap(), a.states());
        let b = simulate_paths(&p, &g, 50, &StreamRng::new(3)).unwrap();
        assert_eq!(a, b);
        let c = simulate_paths(&p, &g, 50, &StreamRng::new(4)).unwrap();
        assert_ne!(a.increments(), c.increments());
        // Paths do not depend on how many siblings were drawn.
        let small = simulate_paths(&p, &g, 5, &StreamRng::new(3)).unwrap();
        for k in 0..5 {
            assert_eq!(small.state(k, 12), a.state(k, 12));
        }
    }

    #[test]
    fn state_dependent_coefficients_follow_euler_recursion() {
        let p = BsdeProblem::builder("ou", 1, 1.0, vec![1.0])
            .drift(Drift::Field(Arc::new(|_, x, out| out[0] = -x[0])))
            .diffusion(Diffusion::Field(Arc::new(|t, x, out| out[0] = 0.5 + t * x[0].abs().min(1.0))))
            .terminal(Arc::new(|x| x[0]))
            .build()
            .unwrap();
        let g = TimeGrid::uniform(5, 1.0).unwrap();
        let b = simulate_paths(&p, &g, 4, &StreamRng::new(0)).unwrap();
        for k in 0..4 {
            for j in 0..5 {
                let x = b.state(k, j)[0];
                let t = g.time(j);
                let expect = x - x * g.dt(j) + (0.5 + t * x.abs().min(1.0)) * b.increment(k, j)[0];
                assert_eq!(b.state(k, j + 1)[0], expect);
            }
        }
    }

    #[test]
    fn non_finite_coefficients_report_the_step() {
        let p = BsdeProblem::builder("blowup", 1, 1.0, vec![1.0])
            .drift(Drift::Field(Arc::new(|t, _, out| out[0] = if t > 0.3 { f64::INFINITY } else { 0.0 })))
            .terminal(Arc::new(|x| x[0]))
            .build()
            .unwrap();
        let g = TimeGrid::uniform(5, 1.0).unwrap();
        match simulate_paths(&p, &g, 2, &StreamRng::new(0)) {
            Err(Error::Simulation { step }) => assert_eq!(step, 3),
            other => panic!("expected simulation error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_batches_are_prefixes() {
        let p = bounded_example(&BoundedParams::new(2, 1.0)).unwrap();
        let g = TimeGrid::uniform(8, 1.0).unwrap();
        let r = StreamRng::new(11);
        let full = simulate_paths(&p, &g, 6, &r).unwrap();
        let part = simulate_until(&p, &g, 3, 6, &r).unwrap();
        assert_eq!(part.end_step(), 3);
        for k in 0..6 {
            for j in 0..3 {
                assert_eq!(part.state(k, j), full.state(k, j));
                assert_eq!(part.increment(k, j), full.increment(k, j));
            }
            assert_eq!(part.state(k, 3), full.state(k, 3));
        }
        assert_eq!(part.replay(&p).unwrap(), part.states());
        assert!(simulate_until(&p, &g, 0, 6, &r).is_err());
        assert!(simulate_until(&p, &g, 9, 6, &r).is_err());
    }

    #[test]
    fn derived_streams_differ() {
        let r = StreamRng::new(42);
        assert_ne!(r.derive(0), r.derive(1));
        assert_eq!(r.derive(5), r.derive(5));
        assert_ne!(StreamRng::new(42).derive(1), StreamRng::new(43).derive(1));
    }
}
