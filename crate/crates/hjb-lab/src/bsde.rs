//! Backward SDE solvers along a path bundle.
//!
//! Plain and penalized equations are solved by backward least-squares
//! regression: at the terminal node Y = Phi(X_T); per step,
//!
//! ```text
//! Z_k = Regress(Y_{k+1} dW_k | X_k) / dt
//! Y_k = Regress(Y_{k+1} | X_k) + f(t_k, X_k, Y'_k, Z_k, u_k) dt  (+ penalty)
//! ```
//!
//! with the predictor `Y'_k = Regress(Y_{k+1} | X_k)`. The driver is explicit
//! in f; the penalty term `+n (Y - phi)^-` (lower) or `-n (Y - phi)^+` (upper)
//! is treated implicitly, which reduces to a scalar piecewise-linear solve per
//! node and is stable for arbitrarily large penalty levels.
//!
//! Conditional expectations default to hypercube-cell indicator regression
//! (piecewise-constant, monotone and local); global polynomials are available
//! for smooth problems. Cells holding fewer than two paths are merged with the
//! nearest populated cell.

use crate::error::{Error, Result};
use crate::expr::EvalEnv;
use crate::forward::{simulate_paths, ControlPolicy, PathBundle, TimeGrid};
use crate::par::{mean_var, ordered_sum};
use crate::problem::{ControlProblem, ObstacleSide, MAX_DIM};
use serde::Serialize;

/// Conditional-expectation estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum RegressionBasis {
    /// Indicator functions of a uniform hypercube partition of the sampled
    /// state range, `per_dim` cells per dimension.
    Cells { per_dim: usize },
    /// Global polynomials of total degree <= `degree`.
    Polynomial { degree: usize },
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis::Cells { per_dim: 50 }
    }
}

/// Strictly increasing penalty levels, all >= 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyLadder {
    pub levels: Vec<u64>,
}

impl PenaltyLadder {
    pub fn new(levels: Vec<u64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::validation("penalty_ladder", "must be nonempty"));
        }
        if levels[0] < 1 {
            return Err(Error::validation("penalty_ladder", "levels must be >= 1"));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("penalty_ladder", "levels must be strictly increasing"));
        }
        Ok(PenaltyLadder { levels })
    }

    /// Doubling ladder `1, 2, 4, ..., 2^log2_top`.
    pub fn doubling(log2_top: u32) -> Self {
        PenaltyLadder { levels: (0..=log2_top).map(|k| 1u64 << k).collect() }
    }
}

/// Backward solution along a bundle. Row-major layouts match [`PathBundle`].
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub m: usize,
    /// `n_paths x n_nodes`.
    pub y: Vec<f64>,
    /// `n_paths x steps x m`.
    pub z: Vec<f64>,
    /// Cumulative increasing process, `n_paths x n_nodes`; zero until
    /// [`recover_k`] fills it.
    pub k: Vec<f64>,
    /// Estimate of Y at the initial node (mean over paths).
    pub y0: f64,
    /// 95% confidence half-width of `y0` from the pathwise accumulations.
    pub ci95: f64,
    /// Number of cell merges performed because a cell held fewer than two
    /// paths.
    pub merge_count: usize,
}

impl BsdeSolution {
    #[inline]
    pub fn y_at(&self, path: usize, node: usize) -> f64 {
        self.y[path * (self.grid.steps + 1) + node]
    }

    #[inline]
    pub fn z_at(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.grid.steps + step) * self.m;
        &self.z[base..base + self.m]
    }

    #[inline]
    pub fn k_at(&self, path: usize, node: usize) -> f64 {
        self.k[path * (self.grid.steps + 1) + node]
    }

    /// Dumps the solution as CSV: `path,step,node_time,y,z1..zm,k`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "path,step,node_time,y")?;
        for j in 1..=self.m {
            write!(w, ",z{j}")?;
        }
        writeln!(w, ",k")?;
        for p in 0..self.n_paths {
            for node in 0..=self.grid.steps {
                write!(w, "{p},{node},{:.16e},{:.16e}", self.grid.node(node), self.y_at(p, node))?;
                for j in 0..self.m {
                    let z = if node < self.grid.steps { self.z_at(p, node)[j] } else { 0.0 };
                    write!(w, ",{z:.16e}")?;
                }
                writeln!(w, ",{:.16e}", self.k_at(p, node))?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// regression machinery

enum Regressor {
    Cells(CellPartition),
    Poly { exponents: Vec<[u8; MAX_DIM]>, d: usize },
}

struct CellPartition {
    d: usize,
    per_dim: usize,
    lo: Vec<f64>,
    width: Vec<f64>,
}

impl CellPartition {
    fn from_bundle(bundle: &PathBundle, per_dim: usize) -> Self {
        let d = bundle.d;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for v in bundle.states.chunks_exact(d) {
            for i in 0..d {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        let mut width = vec![0.0; d];
        let mut per = per_dim.max(1);
        for i in 0..d {
            let span = hi[i] - lo[i];
            if span < 1e-12 {
                // Degenerate direction: one cell covers everything.
                width[i] = 1.0;
            } else {
                width[i] = span / per as f64 * (1.0 + 1e-12);
            }
        }
        // Degenerate in every direction collapses to a single cell.
        if width.iter().all(|w| *w == 1.0) {
            per = 1;
        }
        CellPartition { d, per_dim: per, lo, width }
    }

    fn n_cells(&self) -> usize {
        self.per_dim.pow(self.d as u32)
    }

    #[inline]
    fn cell_of(&self, x: &[f64]) -> usize {
        let mut cell = 0usize;
        for i in 0..self.d {
            let mut c = ((x[i] - self.lo[i]) / self.width[i]).floor() as isize;
            c = c.clamp(0, self.per_dim as isize - 1);
            cell = cell * self.per_dim + c as usize;
        }
        cell
    }

    fn unflatten(&self, mut cell: usize) -> [usize; MAX_DIM] {
        let mut idx = [0usize; MAX_DIM];
        for i in (0..self.d).rev() {
            idx[i] = cell % self.per_dim;
            cell /= self.per_dim;
        }
        idx
    }

    /// Nearest populated cell by Chebyshev ring search, lexicographic
    /// tie-break within a ring.
    fn nearest_populated(&self, cell: usize, counts: &[u32]) -> Option<usize> {
        let center = self.unflatten(cell);
        for radius in 1..self.per_dim {
            let mut ranges = [(0usize, 0usize); MAX_DIM];
            let mut cursor = [0usize; MAX_DIM];
            for i in 0..self.d {
                ranges[i] = (
                    center[i].saturating_sub(radius),
                    (center[i] + radius).min(self.per_dim - 1),
                );
                cursor[i] = ranges[i].0;
            }
            loop {
                // Only the shell at exactly `radius`; the interior was
                // covered by smaller rings.
                let cheb = (0..self.d)
                    .map(|i| center[i].abs_diff(cursor[i]))
                    .max()
                    .unwrap_or(0);
                if cheb == radius {
                    let mut flat = 0usize;
                    for i in 0..self.d {
                        flat = flat * self.per_dim + cursor[i];
                    }
                    if counts[flat] >= 2 {
                        return Some(flat);
                    }
                }
                if !advance_odometer(&mut cursor[..self.d], &ranges[..self.d]) {
                    break;
                }
            }
        }
        None
    }
}

/// Lexicographic odometer step over a hyperrectangle; false when exhausted.
fn advance_odometer(cursor: &mut [usize], ranges: &[(usize, usize)]) -> bool {
    for i in (0..cursor.len()).rev() {
        if cursor[i] < ranges[i].1 {
            cursor[i] += 1;
            for j in (i + 1)..cursor.len() {
                cursor[j] = ranges[j].0;
            }
            return true;
        }
    }
    false
}

impl Regressor {
    fn new(bundle: &PathBundle, basis: &RegressionBasis) -> Result<Self> {
        match basis {
            RegressionBasis::Cells { per_dim } => {
                if *per_dim == 0 {
                    return Err(Error::validation("basis", "cells per dim must be >= 1"));
                }
                Ok(Regressor::Cells(CellPartition::from_bundle(bundle, *per_dim)))
            }
            RegressionBasis::Polynomial { degree } => {
                let d = bundle.d;
                let q = *degree;
                if q > 12 {
                    return Err(Error::validation("basis", "polynomial degree too large"));
                }
                let mut exponents = Vec::new();
                let mut stack = [0u8; MAX_DIM];
                enumerate_exponents(d, q as u8, 0, &mut stack, &mut exponents);
                Ok(Regressor::Poly { exponents, d })
            }
        }
    }

    /// Least-squares fit of `targets` on the basis at the states of node
    /// `node`; writes per-path predictions into `out`. Returns the number of
    /// cell merges performed.
    fn regress(
        &self,
        bundle: &PathBundle,
        node: usize,
        targets: &[f64],
        out: &mut [f64],
    ) -> usize {
        match self {
            Regressor::Cells(part) => {
                let n = bundle.n_paths;
                let nc = part.n_cells();
                let mut counts = vec![0u32; nc];
                let mut sums = vec![0.0f64; nc];
                let mut comps = vec![0.0f64; nc];
                let mut cells = vec![0u32; n];
                for p in 0..n {
                    let c = part.cell_of(bundle.state(p, node));
                    cells[p] = c as u32;
                    counts[c] += 1;
                    // Neumaier-compensated accumulation.
                    let v = targets[p];
                    let s = sums[c];
                    let t = s + v;
                    comps[c] += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
                    sums[c] = t;
                }
                // Pool each under-populated cell with its nearest populated
                // neighbor. Pooling (rather than borrowing the neighbor's
                // mean) keeps the regression an exact projection: the sum of
                // predictions equals the sum of targets.
                let mut merges = 0usize;
                let mut group: Vec<u32> = (0..nc as u32).collect();
                for c in 0..nc {
                    if counts[c] == 1 {
                        merges += 1;
                        group[c] = match part.nearest_populated(c, &counts) {
                            Some(target_cell) => target_cell as u32,
                            None => u32::MAX, // pool globally
                        };
                    }
                }
                let mut gsum = vec![0.0f64; nc];
                let mut gcount = vec![0u32; nc];
                let mut global_sum = 0.0f64;
                let mut global_count = 0u32;
                for c in 0..nc {
                    if counts[c] == 0 {
                        continue;
                    }
                    let g = group[c];
                    if g == u32::MAX {
                        global_sum += sums[c] + comps[c];
                        global_count += counts[c];
                    } else {
                        gsum[g as usize] += sums[c] + comps[c];
                        gcount[g as usize] += counts[c];
                    }
                }
                let global_mean =
                    if global_count > 0 { global_sum / global_count as f64 } else { 0.0 };
                let mut means = vec![0.0f64; nc];
                for c in 0..nc {
                    if gcount[c] > 0 {
                        means[c] = gsum[c] / gcount[c] as f64;
                    }
                }
                for p in 0..n {
                    let g = group[cells[p] as usize];
                    out[p] = if g == u32::MAX { global_mean } else { means[g as usize] };
                }
                merges
            }
            Regressor::Poly { exponents, d } => {
                let nb = exponents.len();
                let n = bundle.n_paths;
                let mut gram = vec![0.0f64; nb * nb];
                let mut rhs = vec![0.0f64; nb];
                let mut feat = vec![0.0f64; nb];
                for p in 0..n {
                    let x = bundle.state(p, node);
                    eval_features(exponents, *d, x, &mut feat);
                    for i in 0..nb {
                        rhs[i] += feat[i] * targets[p];
                        for j in i..nb {
                            gram[i * nb + j] += feat[i] * feat[j];
                        }
                    }
                }
                for i in 0..nb {
                    for j in 0..i {
                        gram[i * nb + j] = gram[j * nb + i];
                    }
                }
                // Tiny ridge keeps degenerate designs (e.g. all paths equal)
                // solvable without changing well-posed fits measurably.
                let trace: f64 = (0..nb).map(|i| gram[i * nb + i]).sum();
                let ridge = 1e-12 * (trace / nb as f64).max(1e-300);
                for i in 0..nb {
                    gram[i * nb + i] += ridge;
                }
                let beta = solve_dense(&mut gram, &mut rhs, nb);
                for p in 0..n {
                    let x = bundle.state(p, node);
                    eval_features(exponents, *d, x, &mut feat);
                    out[p] = (0..nb).map(|i| beta[i] * feat[i]).sum();
                }
                0
            }
        }
    }
}

fn enumerate_exponents(
    d: usize,
    budget: u8,
    dim: usize,
    stack: &mut [u8; MAX_DIM],
    out: &mut Vec<[u8; MAX_DIM]>,
) {
    if dim == d {
        out.push(*stack);
        return;
    }
    for e in 0..=budget {
        stack[dim] = e;
        enumerate_exponents(d, budget - e, dim + 1, stack, out);
    }
    stack[dim] = 0;
}

fn eval_features(exponents: &[[u8; MAX_DIM]], d: usize, x: &[f64], out: &mut [f64]) {
    for (slot, exps) in out.iter_mut().zip(exponents) {
        let mut v = 1.0;
        for i in 0..d {
            for _ in 0..exps[i] {
                v *= x[i];
            }
        }
        *slot = v;
    }
}

/// Gaussian elimination with partial pivoting; `a` is n x n row-major,
/// overwritten. Returns the solution of `a beta = b`.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Vec<f64> {
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let diag = a[col * n + col];
        if diag == 0.0 {
            continue;
        }
        for r in (col + 1)..n {
            let factor = a[r * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= factor * a[col * n + c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut beta = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in (row + 1)..n {
            acc -= a[row * n + c] * beta[c];
        }
        let diag = a[row * n + row];
        beta[row] = if diag == 0.0 { 0.0 } else { acc / diag };
    }
    beta
}

// ---------------------------------------------------------------------------
// backward solvers

#[derive(Debug, Clone, Copy)]
struct Penalty {
    level: f64,
    side: ObstacleSide,
}

/// Implicit penalty update: solves `y = a + n dt (y - phi)^-` (lower) or
/// `y = a - n dt (y - phi)^+` (upper) in closed form.
#[inline]
fn penalty_update(a: f64, phi: f64, c: f64, side: ObstacleSide) -> f64 {
    match side {
        ObstacleSide::None => a,
        ObstacleSide::Lower => {
            if a >= phi {
                a
            } else {
                (a + c * phi) / (1.0 + c)
            }
        }
        ObstacleSide::Upper => {
            if a <= phi {
                a
            } else {
                (a + c * phi) / (1.0 + c)
            }
        }
    }
}

fn solve_backward(
    bundle: &PathBundle,
    prob: &ControlProblem,
    penalty: Option<Penalty>,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    let n = bundle.n_paths;
    let steps = bundle.grid.steps;
    let n_nodes = steps + 1;
    let m = bundle.m;
    let dt = bundle.grid.dt();
    let regressor = Regressor::new(bundle, basis)?;

    let mut y = vec![0.0f64; n * n_nodes];
    let mut z = vec![0.0f64; n * steps * m];
    // Pathwise driver accumulations for the CI estimate.
    let mut acc = vec![0.0f64; n];

    for p in 0..n {
        let yt = prob.eval_terminal(bundle.state(p, steps))?;
        y[p * n_nodes + steps] = yt;
        acc[p] = yt;
    }

    let mut merge_count = 0usize;
    let mut cont = vec![0.0f64; n];
    let mut targets = vec![0.0f64; n];
    let mut ztarg = vec![0.0f64; n];
    let mut zfit = vec![0.0f64; n];

    for k in (0..steps).rev() {
        let t = bundle.grid.node(k);
        for p in 0..n {
            targets[p] = y[p * n_nodes + k + 1];
        }
        merge_count += regressor.regress(bundle, k, &targets, &mut cont);
        for j in 0..m {
            for p in 0..n {
                ztarg[p] = targets[p] * bundle.increment(p, k)[j];
            }
            merge_count += regressor.regress(bundle, k, &ztarg, &mut zfit);
            for p in 0..n {
                z[(p * steps + k) * m + j] = zfit[p] / dt;
            }
        }
        for p in 0..n {
            let x = bundle.state(p, k);
            let u = &prob.controls[bundle.control_index(p, k)];
            let zp = &z[(p * steps + k) * m..(p * steps + k) * m + m];
            let f = prob
                .driver
                .eval(&EvalEnv { t, x, y: cont[p], z: zp, u })?;
            let a = cont[p] + f * dt;
            let ynew = match penalty {
                None => a,
                Some(pen) => {
                    let phi = prob.eval_obstacle(t, x)?;
                    penalty_update(a, phi, pen.level * dt, pen.side)
                }
            };
            if !ynew.is_finite() {
                return Err(Error::NonFinite(format!("Y on path {p} at step {k}")));
            }
            y[p * n_nodes + k] = ynew;
            // The implicit update satisfies ynew = cont + (f + pen) dt
            // exactly, so the penalty contribution is recovered as a
            // difference.
            acc[p] += ynew - cont[p];
        }
    }

    let y0_vals: Vec<f64> = (0..n).map(|p| y[p * n_nodes]).collect();
    let y0 = ordered_sum(&y0_vals) / n as f64;
    let (_, var) = mean_var(&acc);
    let ci95 = 1.96 * (var / n as f64).sqrt();

    Ok(BsdeSolution {
        grid: bundle.grid.clone(),
        n_paths: n,
        m,
        y,
        z,
        k: vec![0.0; n * n_nodes],
        y0,
        ci95,
        merge_count,
    })
}

/// Solves the plain BSDE (no obstacle).
pub fn solve_bsde(
    bundle: &PathBundle,
    prob: &ControlProblem,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    solve_backward(bundle, prob, None, basis)
}

/// Solves the penalized BSDE at level `n` for the given obstacle side.
/// `n` is fractional to support time-changed penalty weights.
pub fn solve_penalized(
    bundle: &PathBundle,
    prob: &ControlProblem,
    n: f64,
    side: ObstacleSide,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    if prob.obstacle.is_none() {
        return Err(Error::validation("phi", "penalized solve requires an obstacle"));
    }
    if !(n > 0.0) {
        return Err(Error::validation("n", "penalty level must be positive"));
    }
    if side == ObstacleSide::None {
        return Err(Error::validation("side", "penalized solve requires lower or upper"));
    }
    solve_backward(bundle, prob, Some(Penalty { level: n, side }), basis)
}

/// Fills the increasing process `K` of a penalized solution:
/// `K(node) = sum_{j < node} n (Y_j - phi_j)^-/+ dt` (sign by side).
pub fn recover_k(
    sol: &BsdeSolution,
    bundle: &PathBundle,
    prob: &ControlProblem,
    n: f64,
    side: ObstacleSide,
) -> Result<BsdeSolution> {
    let mut out = sol.clone();
    let steps = sol.grid.steps;
    let n_nodes = steps + 1;
    let dt = sol.grid.dt();
    for p in 0..sol.n_paths {
        let mut k_acc = 0.0;
        out.k[p * n_nodes] = 0.0;
        for node in 0..steps {
            let t = sol.grid.node(node);
            let phi = prob.eval_obstacle(t, bundle.state(p, node))?;
            let yv = sol.y_at(p, node);
            let slack = match side {
                ObstacleSide::Lower => (phi - yv).max(0.0),
                ObstacleSide::Upper => (yv - phi).max(0.0),
                ObstacleSide::None => 0.0,
            };
            k_acc += n * slack * dt;
            out.k[p * n_nodes + node + 1] = k_acc;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// fixed-policy value tables

#[derive(Debug, Clone)]
pub struct McSpec {
    pub n_paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub basis: RegressionBasis,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueRow {
    /// Penalty level; 0 for an unpenalized solve.
    pub n: f64,
    pub y0: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueTable {
    pub rows: Vec<ValueRow>,
    /// Extrapolated limit: the last ladder level's estimate.
    pub limit: f64,
    pub limit_ci95: f64,
}

/// Estimates Y at `(t, x)` under a fixed policy across a penalty ladder.
/// Fixed policies give upper bounds on the value function for no-obstacle
/// and lower-obstacle problems. All ladder levels share one bundle (and
/// therefore one increment stream).
pub fn value_fixed_control(
    prob: &ControlProblem,
    t: f64,
    x: &[f64],
    policy: &ControlPolicy,
    ladder: &PenaltyLadder,
    mc: &McSpec,
) -> Result<ValueTable> {
    let grid = TimeGrid::new(t, prob.horizon, mc.steps)?;
    let bundle = simulate_paths(prob, policy, t, x, &grid, mc.n_paths, mc.seed)?;
    let mut rows = Vec::new();
    match prob.obstacle_side {
        ObstacleSide::None => {
            let sol = solve_bsde(&bundle, prob, &mc.basis)?;
            rows.push(ValueRow { n: 0.0, y0: sol.y0, ci95: sol.ci95 });
        }
        side => {
            for &n in &ladder.levels {
                let sol = solve_penalized(&bundle, prob, n as f64, side, &mc.basis)?;
                rows.push(ValueRow { n: n as f64, y0: sol.y0, ci95: sol.ci95 });
            }
        }
    }
    let last = rows.last().expect("nonempty rows");
    Ok(ValueTable { limit: last.y0, limit_ci95: last.ci95, rows })
}

// ---------------------------------------------------------------------------
// comparison harness

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub pairs_checked: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    pub max_violation: f64,
    pub tau_reg: f64,
    pub pass: bool,
}

/// Checks the comparison property `Y_A <= Y_B` pathwise when the data of A
/// sits below the data of B. Both problems are solved on the same bundle.
/// The ordering preconditions are verified by sampling; a violation is an
/// error. Beyond-regression-tolerance violations are reported; the
/// tolerance is three times the rms of the two CI half-widths.
pub fn comparison_harness(
    prob_a: &ControlProblem,
    prob_b: &ControlProblem,
    bundle: &PathBundle,
    basis: &RegressionBasis,
    penalty: Option<(f64, ObstacleSide)>,
) -> Result<ComparisonReport> {
    sample_ordering(prob_a, prob_b, bundle)?;
    let (sol_a, sol_b) = match penalty {
        None => (
            solve_bsde(bundle, prob_a, basis)?,
            solve_bsde(bundle, prob_b, basis)?,
        ),
        Some((n, side)) => (
            solve_penalized(bundle, prob_a, n, side, basis)?,
            solve_penalized(bundle, prob_b, n, side, basis)?,
        ),
    };
    let tau_reg = (3.0 * ((sol_a.ci95 * sol_a.ci95 + sol_b.ci95 * sol_b.ci95) / 2.0).sqrt())
        .max(1e-12);
    let n_nodes = bundle.grid.steps + 1;
    let mut violations = 0usize;
    let mut max_violation = 0.0f64;
    for p in 0..bundle.n_paths {
        for node in 0..n_nodes {
            let gap = sol_a.y[p * n_nodes + node] - sol_b.y[p * n_nodes + node];
            if gap > max_violation {
                max_violation = gap;
            }
            if gap > tau_reg {
                violations += 1;
            }
        }
    }
    let pairs_checked = bundle.n_paths * n_nodes;
    Ok(ComparisonReport {
        pairs_checked,
        violations,
        violation_fraction: violations as f64 / pairs_checked as f64,
        max_violation,
        tau_reg,
        pass: max_violation <= tau_reg,
    })
}

fn sample_ordering(
    prob_a: &ControlProblem,
    prob_b: &ControlProblem,
    bundle: &PathBundle,
) -> Result<()> {
    let n_nodes = bundle.grid.steps + 1;
    let stride = (bundle.n_paths / 64).max(1);
    for p in (0..bundle.n_paths).step_by(stride) {
        for node in (0..n_nodes).step_by((n_nodes / 16).max(1)) {
            let x = bundle.state(p, node);
            let t = bundle.grid.node(node);
            let ta = prob_a.eval_terminal(x)?;
            let tb = prob_b.eval_terminal(x)?;
            if ta > tb + 1e-12 {
                return Err(Error::Precondition(format!(
                    "terminal ordering violated at x={x:?}: {ta} > {tb}"
                )));
            }
            for probe in 0..4 {
                let y = -2.0 + 4.0 * crate::rng::uniform(bundle.seed, p as u64, node as u64, probe);
                let z: Vec<f64> = (0..bundle.m)
                    .map(|j|ukey(bundle.seed, p, node, 10 + probe * 4 + j as u64))
                    .collect();
                let step = node.min(bundle.grid.steps - 1);
                let u = &prob_a.controls[bundle.control_index(p, step)];
                let fa = prob_a.driver.eval(&EvalEnv { t, x, y, z: &z, u })?;
                let fb = prob_b.driver.eval(&EvalEnv { t, x, y, z: &z, u })?;
                if fa > fb + 1e-12 {
                    return Err(Error::Precondition(format!(
                        "driver ordering violated at (t={t}, x={x:?}, y={y}): {fa} > {fb}"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn ukey(seed: u64, p: usize, node: usize, lane: u64) -> f64 {
    -2.0 + 4.0 * crate::rng::uniform(seed, p as u64, node as u64, lane)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_coefficient, VarSpace};
    use crate::problem::ObstacleSide;

    fn c1(text: &str) -> crate::expr::CoefficientExpr {
        parse_coefficient(text, &VarSpace::new(1, 1, 0)).unwrap()
    }

    fn prob_1d(
        b: &str,
        sigma: &str,
        f: &str,
        terminal: &str,
        obstacle: Option<&str>,
        side: ObstacleSide,
        horizon: f64,
    ) -> ControlProblem {
        ControlProblem::uncontrolled(
            1,
            1,
            horizon,
            vec![c1(b)],
            vec![c1(sigma)],
            c1(f),
            c1(terminal),
            obstacle.map(c1),
            side,
        )
        .unwrap()
    }

    fn bundle_for(prob: &ControlProblem, t: f64, x: f64, steps: usize, n: usize, seed: u64) -> PathBundle {
        let grid = TimeGrid::new(t, prob.horizon, steps).unwrap();
        simulate_paths(prob, &ControlPolicy::Constant(0), t, &[x], &grid, n, seed).unwrap()
    }

    #[test]
    fn zero_data_zero_solution() {
        let prob = prob_1d("0", "1", "0", "0", None, ObstacleSide::None, 1.0);
        let bundle = bundle_for(&prob, 0.0, 0.0, 20, 200, 5);
        let sol = solve_bsde(&bundle, &prob, &RegressionBasis::default()).unwrap();
        assert_eq!(sol.y0, 0.0);
        assert!(sol.y.iter().all(|v| *v == 0.0));
        assert!(sol.z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn terminal_slice_exact() {
        let prob = prob_1d("0", "1", "-y/2", "cos(x1)", None, ObstacleSide::None, 1.0);
        let bundle = bundle_for(&prob, 0.0, 0.3, 16, 500, 8);
        let sol = solve_bsde(&bundle, &prob, &RegressionBasis::default()).unwrap();
        for p in 0..bundle.n_paths {
            let expected = bundle.state(p, 16)[0].cos();
            assert_eq!(sol.y_at(p, 16), expected);
        }
    }

    #[test]
    fn expected_absolute_value_of_brownian() {
        // f=0, Phi=|x|, sigma=1, from (t=0, x=0), T=1: y0 ~ sqrt(2/pi).
        let prob = prob_1d("0", "1", "0", "abs(x1)", None, ObstacleSide::None, 1.0);
        let bundle = bundle_for(&prob, 0.0, 0.0, 50, 100_000, 42);
        let sol = solve_bsde(&bundle, &prob, &RegressionBasis::default()).unwrap();
        let oracle = (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (sol.y0 - oracle).abs() <= sol.ci95 + 5e-3,
            "y0 {} vs {oracle} (ci {})",
            sol.y0,
            sol.ci95
        );
    }

    #[test]
    fn linear_driver_feynman_kac() {
        // f = -y/2, Phi = cos x, sigma=1: Y_t = exp(-(T-t)) cos x, y0 = e^-1.
        let prob = prob_1d("0", "1", "-y/2", "cos(x1)", None, ObstacleSide::None, 1.0);
        let bundle = bundle_for(&prob, 0.0, 0.0, 50, 100_000, 99);
        let sol = solve_bsde(&bundle, &prob, &RegressionBasis::default()).unwrap();
        let oracle = (-1.0f64).exp();
        assert!(
            (sol.y0 - oracle).abs() <= sol.ci95 + 5e-3,
            "y0 {} vs {oracle} (ci {})",
            sol.y0,
            sol.ci95
        );
    }

    #[test]
    fn zero_driver_martingale_mean() {
        // With f=0 and no obstacle, y0 equals the plain Monte Carlo mean of
        // Phi(X_T) to near machine precision.
        let prob = prob_1d("0", "1", "0", "tanh(x1)+0.25*x1", None, ObstacleSide::None, 1.0);
        let bundle = bundle_for(&prob, 0.0, 0.4, 40, 50_000, 17);
        let sol = solve_bsde(&bundle, &prob, &RegressionBasis::default()).unwrap();
        let term: Vec<f64> = (0..bundle.n_paths)
            .map(|p| {
                let x = bundle.state(p, 40)[0];
                x.tanh() + 0.25 * x
            })
            .collect();
        let mc = ordered_sum(&term) / term.len() as f64;
        assert!((sol.y0 - mc).abs() < 1e-12, "gap {}", (sol.y0 - mc).abs());
    }

    #[test]
    fn z_estimates_gradient_times_sigma() {
        // Phi = x, f = 0, sigma = 1: Z = dV/dx * sigma = 1.
        let prob = prob_1d("0", "1", "0", "x1", None, ObstacleSide::None, 1.0);
        let bundle = bundle_for(&prob, 0.0, 0.0, 10, 200_000, 31);
        let sol = solve_bsde(&bundle, &prob, &RegressionBasis::Polynomial { degree: 2 }).unwrap();
        // Check a middle step, averaged over paths.
        let zs: Vec<f64> = (0..bundle.n_paths).map(|p| sol.z_at(p, 5)[0]).collect();
        let (mean, _) = mean_var(&zs);
        assert!((mean - 1.0).abs() < 0.05, "mean z {mean}");
    }

    #[test]
    fn inactive_obstacle_is_bitwise_plain() {
        let plain = prob_1d("0", "1", "-y/2", "cos(x1)", None, ObstacleSide::None, 1.0);
        let fenced = prob_1d("0", "1", "-y/2", "cos(x1)", Some("-1000000"), ObstacleSide::Lower, 1.0);
        let bundle = bundle_for(&plain, 0.0, 0.0, 24, 2000, 7);
        let a = solve_bsde(&bundle, &plain, &RegressionBasis::default()).unwrap();
        let b = solve_penalized(&bundle, &fenced, 64.0, ObstacleSide::Lower, &RegressionBasis::default()).unwrap();
        for (x, y) in a.y.iter().zip(&b.y) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // And K recovers as identically zero.
        let with_k = recover_k(&b, &bundle, &fenced, 64.0, ObstacleSide::Lower).unwrap();
        assert!(with_k.k.iter().all(|v| *v == 0.0));
    }

    /// Closed form for the penalized version of the constant-coefficient
    /// lower-obstacle example (b=sigma=0, f=-1, phi=0, Phi=1):
    /// Y_s = 1-(T-s) for s >= T-1, and -(1/n)(1-exp(-n(T-1-s))) below.
    fn ex31_penalized_oracle(t: f64, horizon: f64, n: f64) -> f64 {
        let kink = horizon - 1.0;
        if t >= kink {
            1.0 - (horizon - t)
        } else {
            -(1.0 - (-n * (kink - t)).exp()) / n
        }
    }

    #[test]
    fn penalized_lower_obstacle_ladder() {
        let prob = prob_1d("0", "0", "-1", "1", Some("0"), ObstacleSide::Lower, 2.0);
        let bundle = bundle_for(&prob, 0.5, 0.0, 1500, 64, 3);
        let mut prev = f64::NEG_INFINITY;
        for n in [1.0, 2.0, 4.0, 16.0, 64.0, 256.0] {
            let sol =
                solve_penalized(&bundle, &prob, n, ObstacleSide::Lower, &RegressionBasis::default())
                    .unwrap();
            // Monotone nondecreasing in n toward the reflected value 0.
            assert!(sol.y0 >= prev - 1e-13, "n={n}: {} < {prev}", sol.y0);
            prev = sol.y0;
            assert!(sol.y0 <= 1e-10, "n={n}: {}", sol.y0);
            assert!(sol.y0.abs() <= 2.0 / n, "n={n}: {}", sol.y0);
            let oracle = ex31_penalized_oracle(0.5, 2.0, n);
            assert!(
                (sol.y0 - oracle).abs() < 5e-3,
                "n={n}: {} vs oracle {oracle}",
                sol.y0
            );
        }
        // From t=1.5 the obstacle never binds and the value is exactly 0.5.
        let bundle = bundle_for(&prob, 1.5, 0.0, 500, 16, 3);
        for n in [16.0, 256.0] {
            let sol =
                solve_penalized(&bundle, &prob, n, ObstacleSide::Lower, &RegressionBasis::default())
                    .unwrap();
            assert!((sol.y0 - 0.5).abs() < 1e-12, "n={n}: {}", sol.y0);
        }
    }

    #[test]
    fn penalized_upper_obstacle_ladder_decreases() {
        // Mirror data: f = +1 pushes the solution into the upper barrier
        // phi = 1.5; the penalized family approaches 1.5 from above,
        // nonincreasing in n, with gap 1/n.
        let prob = prob_1d("0", "0", "1", "1", Some("1.5"), ObstacleSide::Upper, 2.0);
        let bundle = bundle_for(&prob, 0.5, 0.0, 1500, 16, 3);
        let mut prev = f64::INFINITY;
        for n in [1.0, 4.0, 16.0, 64.0, 256.0] {
            let sol =
                solve_penalized(&bundle, &prob, n, ObstacleSide::Upper, &RegressionBasis::default())
                    .unwrap();
            assert!(sol.y0 <= prev + 1e-13, "n={n}: {} > {prev}", sol.y0);
            prev = sol.y0;
            assert!(sol.y0 >= 1.5 - 1e-10, "n={n}: {}", sol.y0);
            assert!((sol.y0 - 1.5).abs() <= 2.0 / n, "n={n}: {}", sol.y0);
        }
    }

    #[test]
    fn recovered_k_matches_reflected_formula() {
        // K_s = (1-(T-t))^- - (1-(T-s))^- for the same example; from t=0.5,
        // T=2: K(0.8) = 0.3, K(1.2) = 0.5.
        let prob = prob_1d("0", "0", "-1", "1", Some("0"), ObstacleSide::Lower, 2.0);
        let steps = 1500;
        let bundle = bundle_for(&prob, 0.5, 0.0, steps, 8, 3);
        let n = 256.0;
        let sol =
            solve_penalized(&bundle, &prob, n, ObstacleSide::Lower, &RegressionBasis::default())
                .unwrap();
        let sol = recover_k(&sol, &bundle, &prob, n, ObstacleSide::Lower).unwrap();
        let dt = bundle.grid.dt();
        let tol = 2.0 / n + dt;
        let node_at = |s: f64| ((s - 0.5) / dt).round() as usize;
        assert!((sol.k_at(0, node_at(0.8)) - 0.3).abs() <= tol);
        assert!((sol.k_at(0, node_at(1.2)) - 0.5).abs() <= tol);
        // K is nondecreasing with K(0) = 0 on every path.
        for p in 0..bundle.n_paths {
            assert_eq!(sol.k_at(p, 0), 0.0);
            for node in 0..steps {
                assert!(sol.k_at(p, node + 1) >= sol.k_at(p, node) - 1e-15);
            }
        }
    }

    #[test]
    fn obstacle_slack_decays_like_inverse_n() {
        let prob = prob_1d("0", "0", "-1", "1", Some("0"), ObstacleSide::Lower, 2.0);
        let bundle = bundle_for(&prob, 0.5, 0.0, 1000, 8, 3);
        let slack = |n: f64| {
            let sol =
                solve_penalized(&bundle, &prob, n, ObstacleSide::Lower, &RegressionBasis::default())
                    .unwrap();
            let mut worst = vec![0.0f64; bundle.n_paths];
            for p in 0..bundle.n_paths {
                for node in 0..=bundle.grid.steps {
                    worst[p] = worst[p].max(-sol.y_at(p, node));
                }
            }
            ordered_sum(&worst) / worst.len() as f64
        };
        let mut prev = slack(64.0);
        for n in [128.0, 256.0] {
            let cur = slack(n);
            let ratio = cur / prev;
            assert!((0.3..=0.7).contains(&ratio), "n={n}: ratio {ratio}");
            prev = cur;
        }
    }

    #[test]
    fn k_complementarity_in_the_limit() {
        // sum (Y - phi)^+ dK / sum dK -> 0 as n grows.
        let prob = prob_1d("0", "0", "-1", "1", Some("0"), ObstacleSide::Lower, 2.0);
        let bundle = bundle_for(&prob, 0.5, 0.0, 1000, 8, 3);
        let comp = |n: f64| {
            let sol =
                solve_penalized(&bundle, &prob, n, ObstacleSide::Lower, &RegressionBasis::default())
                    .unwrap();
            let sol = recover_k(&sol, &bundle, &prob, n, ObstacleSide::Lower).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for p in 0..bundle.n_paths {
                for node in 0..bundle.grid.steps {
                    let dk = sol.k_at(p, node + 1) - sol.k_at(p, node);
                    num += sol.y_at(p, node).max(0.0) * dk;
                    den += dk;
                }
            }
            num / den.max(1e-300)
        };
        // The implicit penalty step makes discrete complementarity exact:
        // dK > 0 forces Y < phi, so (Y - phi)^+ dK vanishes identically.
        let c64 = comp(64.0);
        let c512 = comp(512.0);
        assert!(c512 <= c64, "{c512} > {c64}");
        assert_eq!(c512, 0.0);
        assert_eq!(c64, 0.0);
    }

    #[test]
    fn fixed_control_reachability_values() {
        // sigma=0, b=u, f=0, Phi=min(|x|,2), T=1, from (0, 1.5).
        let sp = VarSpace::new(1, 1, 1);
        let c = |s: &str| parse_coefficient(s, &sp).unwrap();
        let prob = ControlProblem::new(
            1,
            1,
            1.0,
            vec![c("u1")],
            vec![c("0")],
            c("0"),
            c("min(abs(x1), 2)"),
            None,
            ObstacleSide::None,
            vec![vec![-1.0], vec![0.0], vec![1.0]],
        )
        .unwrap();
        let mc = McSpec { n_paths: 16, steps: 100, seed: 4, basis: RegressionBasis::default() };
        let ladder = PenaltyLadder::doubling(2);
        let down = value_fixed_control(&prob, 0.0, &[1.5], &ControlPolicy::Constant(0), &ladder, &mc)
            .unwrap();
        assert!((down.limit - 0.5).abs() < 1e-12, "{}", down.limit);
        let up = value_fixed_control(&prob, 0.0, &[1.5], &ControlPolicy::Constant(2), &ladder, &mc)
            .unwrap();
        assert!((up.limit - 2.0).abs() < 1e-12, "{}", up.limit);
        // Singleton table for a no-obstacle problem has one unpenalized row.
        assert_eq!(down.rows.len(), 1);
        assert_eq!(down.rows[0].n, 0.0);
    }

    #[test]
    fn comparison_identical_and_ordered() {
        let pa = prob_1d("0", "1", "0", "0", None, ObstacleSide::None, 1.0);
        let pb = prob_1d("0", "1", "0", "1", None, ObstacleSide::None, 1.0);
        let bundle = bundle_for(&pa, 0.0, 0.0, 20, 2000, 12);
        // Identical data: zero violations.
        let rep = comparison_harness(&pa, &pa, &bundle, &RegressionBasis::default(), None).unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.pass);
        assert!(rep.max_violation <= 0.0 + 1e-15);
        // Constants 0 vs 1 propagate exactly.
        let rep = comparison_harness(&pa, &pb, &bundle, &RegressionBasis::default(), None).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn comparison_driver_gap_matches_integral() {
        // f_A = -1 vs f_B = 0, same Phi: Y_B - Y_A = (T - t) at the root.
        let pa = prob_1d("0", "1", "-1", "cos(x1)", None, ObstacleSide::None, 1.0);
        let pb = prob_1d("0", "1", "0", "cos(x1)", None, ObstacleSide::None, 1.0);
        let bundle = bundle_for(&pa, 0.0, 0.0, 40, 20_000, 21);
        let rep = comparison_harness(&pa, &pb, &bundle, &RegressionBasis::default(), None).unwrap();
        assert!(rep.pass, "max violation {}", rep.max_violation);
        let sa = solve_bsde(&bundle, &pa, &RegressionBasis::default()).unwrap();
        let sb = solve_bsde(&bundle, &pb, &RegressionBasis::default()).unwrap();
        let gap = sb.y0 - sa.y0;
        assert!((gap - 1.0).abs() <= sa.ci95 + sb.ci95 + 1e-9, "gap {gap}");
    }

    #[test]
    fn comparison_precondition_detects_misorder() {
        let pa = prob_1d("0", "1", "0", "1", None, ObstacleSide::None, 1.0);
        let pb = prob_1d("0", "1", "0", "0", None, ObstacleSide::None, 1.0);
        let bundle = bundle_for(&pa, 0.0, 0.0, 10, 200, 12);
        let err = comparison_harness(&pa, &pb, &bundle, &RegressionBasis::default(), None)
            .unwrap_err();
        assert!(err.to_string().contains("ordering"));
    }

    #[test]
    fn sparse_2d_cells_merge_and_preserve_means() {
        // Few paths over many 2-D cells force singleton merges; pooled
        // merging must keep the zero-driver estimate equal to the plain
        // Monte Carlo mean.
        let sp = VarSpace::new(2, 2, 0);
        let c = |s: &str| parse_coefficient(s, &sp).unwrap();
        let prob = ControlProblem::uncontrolled(
            2,
            2,
            1.0,
            vec![c("0"), c("0")],
            vec![c("1"), c("0"), c("0.3"), c("1")],
            c("0"),
            c("tanh(x1)*cos(x2)"),
            None,
            ObstacleSide::None,
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let bundle =
            simulate_paths(&prob, &ControlPolicy::Constant(0), 0.0, &[0.0, 0.0], &grid, 300, 23)
                .unwrap();
        let sol =
            solve_bsde(&bundle, &prob, &RegressionBasis::Cells { per_dim: 12 }).unwrap();
        assert!(sol.merge_count > 0, "expected singleton merges on a sparse 2-D grid");
        let term: Vec<f64> = (0..bundle.n_paths)
            .map(|p| {
                let x = bundle.state(p, 10);
                x[0].tanh() * x[1].cos()
            })
            .collect();
        let mc = ordered_sum(&term) / term.len() as f64;
        assert!((sol.y0 - mc).abs() < 1e-12, "gap {}", (sol.y0 - mc).abs());
    }

    #[test]
    fn penalty_ladder_validation() {
        assert!(PenaltyLadder::new(vec![]).is_err());
        assert!(PenaltyLadder::new(vec![0, 1]).is_err());
        assert!(PenaltyLadder::new(vec![1, 1]).is_err());
        assert!(PenaltyLadder::new(vec![1, 2, 4]).is_ok());
        assert_eq!(PenaltyLadder::doubling(3).levels, vec![1, 2, 4, 8]);
    }
}
