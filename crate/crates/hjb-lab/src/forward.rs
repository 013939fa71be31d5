//! Forward simulation of the controlled SDE
//!
//! ```text
//! dX_s = b(s, X_s, u_s) ds + sigma(s, X_s, u_s) dW_s
//! ```
//!
//! by Euler-Maruyama with left-point coefficients on a uniform grid. All
//! randomness comes from the counter-based stream in [`crate::rng`], keyed by
//! `(seed, path, step, component)`, so a bundle is bitwise reproducible no
//! matter how the work is scheduled.

use crate::error::{Error, Result};
use crate::problem::{ControlProblem, MAX_DIM};
use crate::rng;
use rayon::prelude::*;

/// Uniform time grid on `[t_start, t_end]` with `steps` intervals.
/// The last node is `t_end` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t_start < t_end) {
            return Err(Error::validation("grid", "t_start must be below t_end"));
        }
        if steps == 0 {
            return Err(Error::validation("grid", "need at least one step"));
        }
        let g = TimeGrid { t_start, t_end, steps };
        for k in 0..steps {
            if !(g.node(k) < g.node(k + 1)) {
                return Err(Error::validation("grid", "nodes are not strictly increasing"));
            }
        }
        Ok(g)
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.t_end
        } else {
            self.t_start + (self.t_end - self.t_start) * (k as f64 / self.steps as f64)
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }
}

/// How controls are chosen along a path. Feedback policies see only the
/// current node index and the state at that node, so controls are adapted by
/// construction.
#[derive(Debug, Clone)]
pub enum ControlPolicy {
    /// One control-grid index for every path and step.
    Constant(usize),
    /// Feedback on a uniform cell partition of a state box:
    /// `table[node][cell]` is a control-grid index.
    Feedback {
        box_lo: Vec<f64>,
        box_hi: Vec<f64>,
        cells_per_dim: usize,
        /// Length `n_nodes * cells_per_dim^d`.
        table: Vec<u32>,
    },
    /// Pre-committed per-path, per-step indices (row-major `n_paths x steps`).
    PerPathStep { n_paths: usize, steps: usize, table: Vec<u32> },
}

impl ControlPolicy {
    /// Control index for step `k` of path `i`, given the state at node `k`.
    pub fn control_index(&self, node: usize, path: usize, x: &[f64]) -> usize {
        match self {
            ControlPolicy::Constant(idx) => *idx,
            ControlPolicy::Feedback { box_lo, box_hi, cells_per_dim, table } => {
                let n = *cells_per_dim;
                let mut cell = 0usize;
                for i in 0..box_lo.len() {
                    let w = (box_hi[i] - box_lo[i]) / n as f64;
                    let mut c = ((x[i] - box_lo[i]) / w).floor() as isize;
                    c = c.clamp(0, n as isize - 1);
                    cell = cell * n + c as usize;
                }
                table[node * n.pow(box_lo.len() as u32) + cell] as usize
            }
            ControlPolicy::PerPathStep { steps, table, .. } => table[path * steps + node] as usize,
        }
    }

    fn max_index(&self) -> usize {
        match self {
            ControlPolicy::Constant(idx) => *idx,
            ControlPolicy::Feedback { table, .. } => {
                table.iter().copied().max().unwrap_or(0) as usize
            }
            ControlPolicy::PerPathStep { table, .. } => {
                table.iter().copied().max().unwrap_or(0) as usize
            }
        }
    }
}

/// An ensemble of simulated forward paths with their Brownian increments and
/// control indices. Immutable once built.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub d: usize,
    pub m: usize,
    pub seed: u64,
    /// States, `n_paths x n_nodes x d` row-major.
    pub states: Vec<f64>,
    /// Brownian increments, `n_paths x steps x m` row-major.
    pub increments: Vec<f64>,
    /// Control indices, `n_paths x steps` row-major.
    pub controls: Vec<u32>,
}

impl PathBundle {
    #[inline]
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let base = (path * self.grid.n_nodes() + node) * self.d;
        &self.states[base..base + self.d]
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.grid.steps + step) * self.m;
        &self.increments[base..base + self.m]
    }

    #[inline]
    pub fn control_index(&self, path: usize, step: usize) -> usize {
        self.controls[path * self.grid.steps + step] as usize
    }

    /// Dumps the bundle as CSV: `path,step,node_time,x1..xd,dw1..dwm,u_index`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "path,step,node_time")?;
        for i in 1..=self.d {
            write!(w, ",x{i}")?;
        }
        for j in 1..=self.m {
            write!(w, ",dw{j}")?;
        }
        writeln!(w, ",u_index")?;
        for p in 0..self.n_paths {
            for k in 0..self.grid.steps {
                write!(w, "{p},{k},{:.16e}", self.grid.node(k))?;
                for v in self.state(p, k) {
                    write!(w, ",{v:.16e}")?;
                }
                for v in self.increment(p, k) {
                    write!(w, ",{v:.16e}")?;
                }
                writeln!(w, ",{}", self.control_index(p, k))?;
            }
        }
        Ok(())
    }
}

/// The N(0, dt) increment used for `(seed, path, step, component)` on a grid
/// with step `dt`. Exposed so coupled simulations can share the stream.
pub fn brownian_increment(seed: u64, path: usize, step: usize, component: usize, dt: f64) -> f64 {
    rng::brownian_increment(seed, path as u64, step as u64, component as u64, dt)
}

/// Simulates `n_paths` Euler-Maruyama paths from `(t0, x0)`. The control for
/// step k comes from the policy evaluated at the left node.
///
/// Two bundles built from the same seed share the standard-normal stream
/// keyed by `(seed, path, step, component)`; each grid scales it by the
/// square root of its own step, which is exactly the Brownian rescaling the
/// time-change coupling needs when step counts are matched.
pub fn simulate_paths(
    prob: &ControlProblem,
    policy: &ControlPolicy,
    t0: f64,
    x0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    if x0.len() != prob.d {
        return Err(Error::validation("x0", "initial state has wrong dimension"));
    }
    if (grid.t_start - t0).abs() > 1e-12 {
        return Err(Error::validation("grid", "grid must start at t0"));
    }
    if grid.t_end > prob.horizon + 1e-12 {
        return Err(Error::validation("grid", "grid extends past the horizon"));
    }
    if n_paths == 0 {
        return Err(Error::validation("n_paths", "need at least one path"));
    }
    if policy.max_index() >= prob.controls.len() {
        return Err(Error::validation("policy", "control index out of range"));
    }

    let d = prob.d;
    let m = prob.m;
    let steps = grid.steps;
    let n_nodes = grid.n_nodes();
    let dt = grid.dt();

    let mut states = vec![0.0f64; n_paths * n_nodes * d];
    let mut increments = vec![0.0f64; n_paths * steps * m];
    let mut controls = vec![0u32; n_paths * steps];

    let state_chunk = n_nodes * d;
    let inc_chunk = steps * m;

    let result: std::result::Result<Vec<()>, Error> = crate::par::run_pool(|| {
        states
            .par_chunks_mut(state_chunk)
            .zip(increments.par_chunks_mut(inc_chunk))
            .zip(controls.par_chunks_mut(steps))
            .enumerate()
            .map(|(path, ((xs, dws), us))| {
                let mut x = [0.0f64; MAX_DIM];
                x[..d].copy_from_slice(x0);
                xs[..d].copy_from_slice(x0);
                let mut b = [0.0f64; MAX_DIM];
                let mut sig = [0.0f64; MAX_DIM * MAX_DIM];
                for k in 0..steps {
                    let t = grid.node(k);
                    let u_idx = policy.control_index(k, path, &x[..d]);
                    us[k] = u_idx as u32;
                    let u = &prob.controls[u_idx];
                    prob.eval_drift(t, &x[..d], u, &mut b[..d])?;
                    prob.eval_diffusion(t, &x[..d], u, &mut sig[..d * m])?;
                    for j in 0..m {
                        dws[k * m + j] =
                            rng::brownian_increment(seed, path as u64, k as u64, j as u64, dt);
                    }
                    for i in 0..d {
                        let mut xi = x[i] + b[i] * dt;
                        for j in 0..m {
                            xi += sig[i * m + j] * dws[k * m + j];
                        }
                        if !xi.is_finite() {
                            return Err(Error::NonFinite(format!(
                                "state overflow on path {path} at step {k}"
                            )));
                        }
                        x[i] = xi;
                    }
                    xs[(k + 1) * d..(k + 2) * d].copy_from_slice(&x[..d]);
                }
                Ok(())
            })
            .collect()
    });
    result?;

    Ok(PathBundle {
        grid: grid.clone(),
        n_paths,
        d,
        m,
        seed,
        states,
        increments,
        controls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_coefficient, VarSpace};
    use crate::par::mean_var;
    use crate::problem::ObstacleSide;

    fn c1(text: &str) -> crate::expr::CoefficientExpr {
        parse_coefficient(text, &VarSpace::new(1, 1, 1)).unwrap()
    }

    fn prob(b: &str, sigma: &str) -> ControlProblem {
        ControlProblem::new(
            1,
            1,
            1.0,
            vec![c1(b)],
            vec![c1(sigma)],
            c1("0"),
            c1("0"),
            None,
            ObstacleSide::None,
            vec![vec![-1.0], vec![0.0], vec![1.0]],
        )
        .unwrap()
    }

    #[test]
    fn grid_last_node_exact() {
        let g = TimeGrid::new(0.1, 0.3, 7).unwrap();
        assert_eq!(g.node(7), 0.3);
        assert_eq!(g.node(0), 0.1);
        for k in 0..7 {
            assert!(g.node(k) < g.node(k + 1));
        }
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let p = prob("0", "0");
        let g = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let b = simulate_paths(&p, &ControlPolicy::Constant(1), 0.0, &[0.75], &g, 8, 9).unwrap();
        for path in 0..8 {
            for node in 0..g.n_nodes() {
                assert_eq!(b.state(path, node)[0], 0.75);
            }
        }
    }

    #[test]
    fn brownian_terminal_law() {
        // b=0, sigma=1 from x0=0 over [0,1]: X_T is exactly N(0,1) in law.
        let p = prob("0", "1");
        let g = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let n = 100_000;
        let b = simulate_paths(&p, &ControlPolicy::Constant(1), 0.0, &[0.0], &g, n, 2024).unwrap();
        let terminal: Vec<f64> = (0..n).map(|i| b.state(i, g.steps)[0]).collect();
        let (mean, var) = mean_var(&terminal);
        assert!(mean.abs() < 0.016, "mean {mean}");
        assert!((0.98..=1.02).contains(&var), "var {var}");
    }

    #[test]
    fn constant_drift_is_exact() {
        // b=u with u=1, sigma=0: X_T = x0 + (T - t0) exactly for Euler.
        let p = prob("u1", "0");
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let b = simulate_paths(&p, &ControlPolicy::Constant(2), 0.0, &[0.0], &g, 4, 3).unwrap();
        for path in 0..4 {
            assert!((b.state(path, 10)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn increment_sample_mean_bound() {
        let p = prob("0", "1");
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let n = 10_000;
        let b = simulate_paths(&p, &ControlPolicy::Constant(0), 0.0, &[0.0], &g, n, 77).unwrap();
        let dt = g.dt();
        for step in 0..4 {
            let xs: Vec<f64> = (0..n).map(|i| b.increment(i, step)[0]).collect();
            let (mean, _) = mean_var(&xs);
            assert!(mean.abs() <= 5.0 * (dt / n as f64).sqrt(), "step {step}: {mean}");
        }
    }

    #[test]
    fn bitwise_deterministic_across_thread_counts() {
        let p = prob("u1*cos(x1)", "1");
        let g = TimeGrid::new(0.25, 1.0, 32).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                simulate_paths(&p, &ControlPolicy::Constant(2), 0.25, &[0.5], &g, 500, 11).unwrap()
            })
        };
        let a = run(1);
        let b = run(8);
        assert_eq!(a.states.len(), b.states.len());
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.increments.iter().zip(&b.increments) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn refinement_keeps_terminal_distribution() {
        let p = prob("0", "1");
        let n = 40_000;
        let mut vars = Vec::new();
        for steps in [32usize, 64] {
            let g = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let b =
                simulate_paths(&p, &ControlPolicy::Constant(0), 0.0, &[0.0], &g, n, 515).unwrap();
            let terminal: Vec<f64> = (0..n).map(|i| b.state(i, steps)[0]).collect();
            let (_, var) = mean_var(&terminal);
            vars.push(var);
        }
        for v in vars {
            assert!((0.97..=1.03).contains(&v), "var {v}");
        }
    }

    #[test]
    fn per_path_policy_and_feedback_policy() {
        let p = prob("u1", "0");
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        // Path 0 always u=+1 (index 2), path 1 always u=-1 (index 0).
        let pol = ControlPolicy::PerPathStep {
            n_paths: 2,
            steps: 4,
            table: vec![2, 2, 2, 2, 0, 0, 0, 0],
        };
        let b = simulate_paths(&p, &pol, 0.0, &[0.0], &g, 2, 1).unwrap();
        assert!((b.state(0, 4)[0] - 1.0).abs() < 1e-12);
        assert!((b.state(1, 4)[0] + 1.0).abs() < 1e-12);

        // Feedback: push toward zero.
        let fb = ControlPolicy::Feedback {
            box_lo: vec![-2.0],
            box_hi: vec![2.0],
            cells_per_dim: 2,
            table: (0..5).flat_map(|_| [2u32, 0u32]).collect(),
        };
        let b = simulate_paths(&p, &fb, 0.0, &[1.0], &g, 1, 1).unwrap();
        // x0=1 -> upper cell -> index 0 (u=-1) -> decreases toward 0 and
        // then oscillates around it.
        assert!(b.state(0, 4)[0].abs() <= 0.5 + 1e-12);
    }

    #[test]
    fn out_of_range_policy_rejected() {
        let p = prob("0", "1");
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let err =
            simulate_paths(&p, &ControlPolicy::Constant(3), 0.0, &[0.0], &g, 1, 1).unwrap_err();
        assert!(err.to_string().contains("control index"));
    }
}
