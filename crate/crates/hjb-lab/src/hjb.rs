//! Monotone finite-difference solver for the HJB equations on a space-time
//! grid.
//!
//! Backward time stepping from `V(T, .) = Phi`; per node the discrete
//! Hamiltonian uses second-order central differences for the diffusion,
//! the sign-adapted seven-point stencil for cross-derivatives, one-sided
//! upwind differences for the drift (direction chosen by the sign of b per
//! dimension per control candidate), and `z = grad_central . sigma` inside
//! the driver. The obstacle is enforced either by projection or by an
//! implicit penalty step identical to the BSDE one.
//!
//! Boundary closure: no artificial Dirichlet data. Second derivatives at a
//! wall use the one-sided difference (a reflected ghost node), outward
//! drift terms are dropped, and cross terms needing a corner outside the
//! grid are dropped. Every node update stays monotone in its neighbors;
//! the price is a first-order boundary layer, so quantitative reads should
//! stay away from the walls.

use crate::error::{Error, Result};
use crate::expr::{EvalEnv, USES_X, USES_Y, USES_Z};
use crate::problem::{ControlProblem, ObstacleSide, MAX_DIM};
use rayon::prelude::*;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Explicit,
    ImplicitSweep,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Explicit => "explicit",
            Scheme::ImplicitSweep => "implicit-sweep",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Projected,
    Penalized(f64),
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Projected => f.write_str("projected"),
            Variant::Penalized(n) => write!(f, "penalized({n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub nx: usize,
}

impl AxisSpec {
    #[inline]
    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.nx - 1) as f64
    }

    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        if j + 1 >= self.nx {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * (j as f64 / (self.nx - 1) as f64)
        }
    }
}

/// Uniform tensor grid on `[0, T] x box`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    pub horizon: f64,
    pub nt: usize,
    pub axes: Vec<AxisSpec>,
    /// Largest stable explicit time step, from sampled coefficient sups.
    pub explicit_dt_bound: f64,
    pub warnings: Vec<String>,
}

impl SpaceTimeGrid {
    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    #[inline]
    pub fn time_node(&self, k: usize) -> f64 {
        if k >= self.nt {
            self.horizon
        } else {
            self.horizon * (k as f64 / self.nt as f64)
        }
    }

    pub fn d(&self) -> usize {
        self.axes.len()
    }

    pub fn n_space(&self) -> usize {
        self.axes.iter().map(|a| a.nx).product()
    }

    /// Decodes a flat space index into per-dimension indices.
    #[inline]
    pub fn unflatten(&self, mut flat: usize, out: &mut [usize]) {
        for i in (0..self.axes.len()).rev() {
            out[i] = flat % self.axes[i].nx;
            flat /= self.axes[i].nx;
        }
    }

    #[inline]
    pub fn flatten(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for i in 0..self.axes.len() {
            flat = flat * self.axes[i].nx + idx[i];
        }
        flat
    }

    #[inline]
    pub fn coords(&self, idx: &[usize], out: &mut [f64]) {
        for i in 0..self.axes.len() {
            out[i] = self.axes[i].node(idx[i]);
        }
    }

    /// Stride of one step along dimension `i` in the flat index.
    #[inline]
    pub fn stride(&self, i: usize) -> usize {
        self.axes[i + 1..].iter().map(|a| a.nx).product()
    }
}

/// Builds and validates a grid for the given problem and scheme. For the
/// explicit scheme the time step must satisfy the sampled stability bound
///
/// ```text
/// dt * ( sum_i sup(ssT_ii)/dx_i^2 + sum_i sup|b_i|/dx_i + sup|df/dy| ) <= 1.
/// ```
pub fn build_grid(
    box_lo: &[f64],
    box_hi: &[f64],
    nx: &[usize],
    nt: usize,
    prob: &ControlProblem,
    scheme: Scheme,
) -> Result<SpaceTimeGrid> {
    let d = prob.d;
    if box_lo.len() != d || box_hi.len() != d || nx.len() != d {
        return Err(Error::validation("grid", "box/nx dims must match the problem"));
    }
    if nt == 0 {
        return Err(Error::validation("nt", "need at least one time step"));
    }
    let mut axes = Vec::with_capacity(d);
    let mut warnings = Vec::new();
    for i in 0..d {
        if !(box_lo[i] < box_hi[i]) {
            return Err(Error::validation("box", format!("degenerate interval in dim {i}")));
        }
        if nx[i] < 3 {
            return Err(Error::validation("nx", format!("need at least 3 nodes per dim, got {}", nx[i])));
        }
        if nx[i] < 9 {
            warnings.push(format!("dim {i}: only {} nodes; resolution is very coarse", nx[i]));
        }
        axes.push(AxisSpec { lo: box_lo[i], hi: box_hi[i], nx: nx[i] });
    }

    let sups = sample_sups(prob, &axes)?;
    // Cross-derivative stencil needs scaled diagonal dominance.
    for i in 0..d {
        let dx_i = axes[i].dx();
        let mut off = 0.0;
        for j in 0..d {
            if j != i {
                off += sups.a_abs[i * d + j] / (dx_i * axes[j].dx());
            }
        }
        if off > sups.a_diag_min[i] / (dx_i * dx_i) + 1e-12 {
            return Err(Error::validation(
                "sigma",
                format!(
                    "cross-derivative terms violate diagonal dominance in dim {i}; \
                     wide stencils are out of scope"
                ),
            ));
        }
    }
    let mut denom = sups.f_y;
    for i in 0..d {
        let dx = axes[i].dx();
        denom += sups.a_abs[i * d + i] / (dx * dx) + sups.b_abs[i] / dx;
    }
    let explicit_dt_bound = if denom > 0.0 { 1.0 / denom } else { f64::INFINITY };
    let grid = SpaceTimeGrid { horizon: prob.horizon, nt, axes, explicit_dt_bound, warnings };
    if scheme == Scheme::Explicit && grid.dt() > explicit_dt_bound * (1.0 + 1e-9) {
        return Err(Error::Cfl(format!(
            "dt = {:.6e} exceeds the explicit stability bound {:.6e}; \
             increase nt to at least {}",
            grid.dt(),
            explicit_dt_bound,
            (prob.horizon / explicit_dt_bound).ceil() as u64
        )));
    }
    Ok(grid)
}

struct CoeffSups {
    /// sup |(sigma sigma^T)_ij|, row-major d x d.
    a_abs: Vec<f64>,
    /// min over samples of (sigma sigma^T)_ii (for dominance checks).
    a_diag_min: Vec<f64>,
    /// sup |b_i|.
    b_abs: Vec<f64>,
    /// sampled sup |df/dy|.
    f_y: f64,
}

fn sample_sups(prob: &ControlProblem, axes: &[AxisSpec]) -> Result<CoeffSups> {
    let d = prob.d;
    let m = prob.m;
    let mut a_abs = vec![0.0f64; d * d];
    let mut a_diag_min = vec![f64::INFINITY; d];
    let mut b_abs = vec![0.0f64; d];
    let mut f_y = 0.0f64;
    let mut sig = [0.0; MAX_DIM * MAX_DIM];
    let mut b = [0.0; MAX_DIM];
    let mut x = [0.0; MAX_DIM];
    let per_axis = 9usize;
    let n_t = 5usize;
    let mut idx = [0usize; MAX_DIM];
    let total: usize = per_axis.pow(d as u32);
    for u in &prob.controls {
        for kt in 0..=n_t {
            let t = prob.horizon * kt as f64 / n_t as f64;
            for flat in 0..total {
                let mut rem = flat;
                for i in (0..d).rev() {
                    idx[i] = rem % per_axis;
                    rem /= per_axis;
                }
                for i in 0..d {
                    x[i] = axes[i].lo
                        + (axes[i].hi - axes[i].lo) * (idx[i] as f64 / (per_axis - 1) as f64);
                }
                prob.eval_diffusion(t, &x[..d], u, &mut sig[..d * m])?;
                prob.eval_drift(t, &x[..d], u, &mut b[..d])?;
                for i in 0..d {
                    b_abs[i] = b_abs[i].max(b[i].abs());
                    for j in 0..d {
                        let mut ss = 0.0;
                        for l in 0..m {
                            ss += sig[i * m + l] * sig[j * m + l];
                        }
                        a_abs[i * d + j] = a_abs[i * d + j].max(ss.abs());
                        if i == j {
                            a_diag_min[i] = a_diag_min[i].min(ss);
                        }
                    }
                }
                if prob.driver.uses(USES_Y) {
                    let h = 1e-4;
                    let z = [0.0; MAX_DIM];
                    for y0 in [-1.5f64, 0.0, 1.5] {
                        let fp = prob.eval_driver(t, &x[..d], y0 + h, &z[..m], u)?;
                        let fm = prob.eval_driver(t, &x[..d], y0 - h, &z[..m], u)?;
                        f_y = f_y.max(((fp - fm) / (2.0 * h)).abs());
                    }
                }
            }
        }
    }
    Ok(CoeffSups { a_abs, a_diag_min, b_abs, f_y })
}

/// Grid-sampled value function with scheme metadata.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub grid: SpaceTimeGrid,
    /// `(nt+1) * n_space`, slice-major (time outermost).
    pub values: Vec<f64>,
    /// Argmin control index per node, same layout.
    pub argmin: Vec<u32>,
    pub scheme: Scheme,
    pub variant: Variant,
    pub side: ObstacleSide,
    pub problem_hash: u64,
}

impl ValueField {
    #[inline]
    pub fn value(&self, time_idx: usize, flat: usize) -> f64 {
        self.values[time_idx * self.grid.n_space() + flat]
    }

    /// Multilinear interpolation in time and space. Errors outside the hull.
    pub fn interpolate(&self, t: f64, x: &[f64]) -> Result<f64> {
        let grid = &self.grid;
        let d = grid.d();
        if !(0.0 - 1e-12..=grid.horizon + 1e-12).contains(&t) {
            return Err(Error::OutOfDomain(format!("t = {t}")));
        }
        for i in 0..d {
            if x[i] < grid.axes[i].lo - 1e-12 || x[i] > grid.axes[i].hi + 1e-12 {
                return Err(Error::OutOfDomain(format!("x{} = {}", i + 1, x[i])));
            }
        }
        let dt = grid.dt();
        let kf = (t / dt).clamp(0.0, grid.nt as f64);
        let k0 = (kf.floor() as usize).min(grid.nt - 1);
        let wt = (kf - k0 as f64).clamp(0.0, 1.0);

        let mut j0 = [0usize; MAX_DIM];
        let mut wx = [0.0f64; MAX_DIM];
        for i in 0..d {
            let ax = &grid.axes[i];
            let pos = ((x[i] - ax.lo) / ax.dx()).clamp(0.0, (ax.nx - 1) as f64);
            let j = (pos.floor() as usize).min(ax.nx - 2);
            j0[i] = j;
            wx[i] = (pos - j as f64).clamp(0.0, 1.0);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = [0usize; MAX_DIM];
            for i in 0..d {
                if corner & (1 << i) != 0 {
                    idx[i] = j0[i] + 1;
                    w *= wx[i];
                } else {
                    idx[i] = j0[i];
                    w *= 1.0 - wx[i];
                }
            }
            if w == 0.0 {
                continue;
            }
            let flat = grid.flatten(&idx[..d]);
            acc += w * ((1.0 - wt) * self.value(k0, flat) + wt * self.value(k0 + 1, flat));
        }
        Ok(acc)
    }
}

/// Canonical 64-bit hash of the problem definition (FNV-1a over a printed
/// canonical form). Used to tie persisted fields back to their problem.
pub fn problem_hash(prob: &ControlProblem) -> u64 {
    let mut text = format!(
        "d={};m={};T={:?};side={};", prob.d, prob.m, prob.horizon, prob.obstacle_side
    );
    for e in &prob.drift {
        text.push_str(&format!("b:{e};"));
    }
    for e in &prob.diffusion {
        text.push_str(&format!("s:{e};"));
    }
    text.push_str(&format!("f:{};Phi:{};", prob.driver, prob.terminal));
    if let Some(phi) = &prob.obstacle {
        text.push_str(&format!("phi:{phi};"));
    }
    for u in &prob.controls {
        text.push_str(&format!("u:{u:?};"));
    }
    fnv1a(text.as_bytes())
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ---------------------------------------------------------------------------
// the solver

/// Per-slice, per-control coefficient cache when sigma and b do not depend
/// on x.
struct Hoist {
    a: Vec<f64>,
    b: Vec<f64>,
}

struct SliceCtx<'a> {
    prob: &'a ControlProblem,
    grid: &'a SpaceTimeGrid,
    t: f64,
    /// Hoisted (sigma sigma^T, b) per control if x-independent.
    hoisted: Option<Vec<Hoist>>,
    /// Driver value when fully constant.
    f_const: Option<f64>,
}

impl<'a> SliceCtx<'a> {
    fn new(prob: &'a ControlProblem, grid: &'a SpaceTimeGrid, t: f64) -> Result<Self> {
        let coeffs_x_free = prob.drift.iter().all(|e| !e.uses(USES_X))
            && prob.diffusion.iter().all(|e| !e.uses(USES_X));
        let hoisted = if coeffs_x_free {
            let d = prob.d;
            let m = prob.m;
            let mut hs = Vec::with_capacity(prob.controls.len());
            let x0 = [0.0; MAX_DIM];
            let mut sig = [0.0; MAX_DIM * MAX_DIM];
            for u in &prob.controls {
                let mut b = vec![0.0; d];
                prob.eval_drift(t, &x0[..d], u, &mut b)?;
                prob.eval_diffusion(t, &x0[..d], u, &mut sig[..d * m])?;
                let mut a = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        let mut ss = 0.0;
                        for l in 0..m {
                            ss += sig[i * m + l] * sig[j * m + l];
                        }
                        a[i * d + j] = ss;
                    }
                }
                hs.push(Hoist { a, b });
            }
            Some(hs)
        } else {
            None
        };
        let f_const = if prob.driver.is_constant() {
            Some(prob.driver.eval(&EvalEnv::state(0.0, &[]))?)
        } else {
            None
        };
        Ok(SliceCtx { prob, grid, t, hoisted, f_const })
    }

    /// Discrete Hamiltonian at `flat` for control `u_idx`, split as
    /// `H = self_coeff * slice[flat] + rest` where `rest` depends only on
    /// neighbor values of `slice` (and on `y_for_f` through the driver).
    fn h_split(
        &self,
        slice: &[f64],
        flat: usize,
        idx: &[usize],
        x: &[f64],
        u_idx: usize,
        y_for_f: f64,
    ) -> Result<(f64, f64)> {
        let prob = self.prob;
        let grid = self.grid;
        let d = prob.d;
        let m = prob.m;
        let u = &prob.controls[u_idx];

        let mut a_local = [0.0; MAX_DIM * MAX_DIM];
        let mut b_local = [0.0; MAX_DIM];
        let (a, b): (&[f64], &[f64]) = match &self.hoisted {
            Some(hs) => (&hs[u_idx].a, &hs[u_idx].b),
            None => {
                let mut sig = [0.0; MAX_DIM * MAX_DIM];
                prob.eval_diffusion(self.t, x, u, &mut sig[..d * m])?;
                prob.eval_drift(self.t, x, u, &mut b_local[..d])?;
                for i in 0..d {
                    for j in 0..d {
                        let mut ss = 0.0;
                        for l in 0..m {
                            ss += sig[i * m + l] * sig[j * m + l];
                        }
                        a_local[i * d + j] = ss;
                    }
                }
                (&a_local[..d * d], &b_local[..d])
            }
        };

        let center = slice[flat];
        let mut self_coeff = 0.0f64;
        let mut rest = 0.0f64;
        let mut p_central = [0.0f64; MAX_DIM];

        for i in 0..d {
            let nx = grid.axes[i].nx;
            let dx = grid.axes[i].dx();
            let stride = grid.stride(i);
            let at_lo = idx[i] == 0;
            let at_hi = idx[i] + 1 == nx;
            let up = if at_hi { center } else { slice[flat + stride] };
            let dn = if at_lo { center } else { slice[flat - stride] };

            // Diffusion: 1/2 a_ii * second difference. At a wall the
            // missing neighbor is the reflected center (one-sided).
            let w = 0.5 * a[i * d + i] / (dx * dx);
            rest += w * (up + dn);
            self_coeff += -2.0 * w;

            // Drift, upwind by the sign of b_i. Outward-pointing drift at
            // a wall is dropped to keep the update monotone.
            let bi = b[i];
            if bi >= 0.0 {
                if !at_hi {
                    rest += bi / dx * up;
                    self_coeff -= bi / dx;
                }
            } else if !at_lo {
                rest += (-bi) / dx * dn;
                self_coeff -= (-bi) / dx;
            }

            // Central gradient for the driver's z argument.
            p_central[i] = if at_lo {
                (up - center) / dx
            } else if at_hi {
                (center - dn) / dx
            } else {
                (up - dn) / (2.0 * dx)
            };
        }

        // Cross-derivative terms via the sign-adapted seven-point stencil.
        // Corners outside the grid drop the pair's contribution.
        for i in 0..d {
            for j in (i + 1)..d {
                let aij = a[i * d + j];
                if aij == 0.0 {
                    continue;
                }
                let si = grid.stride(i);
                let sj = grid.stride(j);
                let in_lo_i = idx[i] > 0;
                let in_hi_i = idx[i] + 1 < grid.axes[i].nx;
                let in_lo_j = idx[j] > 0;
                let in_hi_j = idx[j] + 1 < grid.axes[j].nx;
                if !(in_lo_i && in_hi_i && in_lo_j && in_hi_j) {
                    continue;
                }
                let denom = 2.0 * grid.axes[i].dx() * grid.axes[j].dx();
                let vpi = slice[flat + si];
                let vmi = slice[flat - si];
                let vpj = slice[flat + sj];
                let vmj = slice[flat - sj];
                if aij > 0.0 {
                    let vpp = slice[flat + si + sj];
                    let vmm = slice[flat - si - sj];
                    self_coeff += 2.0 * aij / denom;
                    rest += aij * (vpp + vmm - vpi - vmi - vpj - vmj) / denom;
                } else {
                    let napj = -aij;
                    let vpm = slice[flat + si - sj];
                    let vmp = slice[flat - si + sj];
                    self_coeff += 2.0 * napj / denom;
                    rest += napj * (vpm + vmp - vpi - vmi - vpj - vmj) / denom;
                }
            }
        }

        let f = match self.f_const {
            Some(v) => v,
            None => {
                let mut z = [0.0f64; MAX_DIM];
                if prob.driver.uses(USES_Z) {
                    let mut sig = [0.0; MAX_DIM * MAX_DIM];
                    prob.eval_diffusion(self.t, x, u, &mut sig[..d * m])?;
                    for l in 0..m {
                        let mut acc = 0.0;
                        for i in 0..d {
                            acc += p_central[i] * sig[i * m + l];
                        }
                        z[l] = acc;
                    }
                }
                prob.driver.eval(&EvalEnv { t: self.t, x, y: y_for_f, z: &z[..m], u })?
            }
        };
        rest += f;
        Ok((self_coeff, rest))
    }
}

/// Solves the HJB equation on the grid. `side` selects the obstacle
/// handling (must match the problem's obstacle), `variant` chooses
/// projection or implicit penalization, `scheme` explicit stepping or
/// nonlinear Gauss-Seidel sweeps.
pub fn solve_hjb(
    prob: &ControlProblem,
    grid: &SpaceTimeGrid,
    side: ObstacleSide,
    variant: Variant,
    scheme: Scheme,
) -> Result<ValueField> {
    if side != ObstacleSide::None && prob.obstacle.is_none() {
        return Err(Error::validation("side", "problem has no obstacle"));
    }
    if side == ObstacleSide::None && matches!(variant, Variant::Penalized(_)) {
        return Err(Error::validation("variant", "penalization needs an obstacle side"));
    }
    if let Variant::Penalized(n) = variant {
        if !(n > 0.0) {
            return Err(Error::validation("variant", "penalty level must be positive"));
        }
    }
    if scheme == Scheme::Explicit && grid.dt() > grid.explicit_dt_bound * (1.0 + 1e-9) {
        return Err(Error::Cfl(format!(
            "dt = {:.6e} exceeds the explicit stability bound {:.6e}",
            grid.dt(),
            grid.explicit_dt_bound
        )));
    }

    let n_space = grid.n_space();
    let nt = grid.nt;
    let d = grid.d();
    let mut values = vec![0.0f64; (nt + 1) * n_space];
    let mut argmin = vec![0u32; (nt + 1) * n_space];

    // Terminal slice: V(T, .) = Phi exactly.
    {
        let (terminal_slice, _) = values.split_at_mut((nt + 1) * n_space);
        let terminal = &mut terminal_slice[nt * n_space..];
        let result: Result<Vec<()>> = terminal
            .iter_mut()
            .enumerate()
            .map(|(flat, slot)| {
                let mut idx = [0usize; MAX_DIM];
                let mut x = [0.0f64; MAX_DIM];
                grid.unflatten(flat, &mut idx[..d]);
                grid.coords(&idx[..d], &mut x[..d]);
                *slot = prob.eval_terminal(&x[..d])?;
                Ok(())
            })
            .collect();
        result?;
    }

    let dt = grid.dt();
    crate::par::run_pool(|| -> Result<()> {
        for k in (0..nt).rev() {
            let t = grid.time_node(k);
            let ctx = SliceCtx::new(prob, grid, t)?;
            let (head, tail) = values.split_at_mut((k + 1) * n_space);
            let cur = &mut head[k * n_space..];
            let prev = &tail[..n_space];
            let arg = &mut argmin[k * n_space..(k + 1) * n_space];
            match scheme {
                Scheme::Explicit => {
                    explicit_slice(&ctx, prob, grid, k, prev, cur, arg, dt, side, variant)?
                }
                Scheme::ImplicitSweep => {
                    implicit_slice(&ctx, prob, grid, k, prev, cur, arg, dt, side, variant)?
                }
            }
        }
        Ok(())
    })?;

    Ok(ValueField {
        grid: grid.clone(),
        values,
        argmin,
        scheme,
        variant,
        side,
        problem_hash: problem_hash(prob),
    })
}

#[allow(clippy::too_many_arguments)]
fn explicit_slice(
    ctx: &SliceCtx,
    prob: &ControlProblem,
    grid: &SpaceTimeGrid,
    k: usize,
    prev: &[f64],
    cur: &mut [f64],
    arg: &mut [u32],
    dt: f64,
    side: ObstacleSide,
    variant: Variant,
) -> Result<()> {
    let d = grid.d();
    let t = grid.time_node(k);
    let results: Result<Vec<()>> = cur
        .par_iter_mut()
        .zip(arg.par_iter_mut())
        .enumerate()
        .map(|(flat, (slot, aslot))| {
            let mut idx = [0usize; MAX_DIM];
            let mut x = [0.0f64; MAX_DIM];
            grid.unflatten(flat, &mut idx[..d]);
            grid.coords(&idx[..d], &mut x[..d]);
            let y = prev[flat];
            let mut best = f64::INFINITY;
            let mut best_u = 0u32;
            for u_idx in 0..prob.controls.len() {
                let (self_c, rest) = ctx.h_split(prev, flat, &idx[..d], &x[..d], u_idx, y)?;
                let h = self_c * y + rest;
                if h < best {
                    best = h;
                    best_u = u_idx as u32;
                }
            }
            let mut v = y + dt * best;
            v = obstacle_step(prob, t, &x[..d], v, dt, side, variant)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "value at time step {k}, node {idx:?}"
                )));
            }
            *slot = v;
            *aslot = best_u;
            Ok(())
        })
        .collect();
    results.map(|_| ())
}

#[allow(clippy::too_many_arguments)]
fn implicit_slice(
    ctx: &SliceCtx,
    prob: &ControlProblem,
    grid: &SpaceTimeGrid,
    k: usize,
    prev: &[f64],
    cur: &mut [f64],
    arg: &mut [u32],
    dt: f64,
    side: ObstacleSide,
    variant: Variant,
) -> Result<()> {
    let d = grid.d();
    let t = grid.time_node(k);
    cur.copy_from_slice(prev);
    let n_space = grid.n_space();
    let max_sweeps = 400;
    let mut idx = [0usize; MAX_DIM];
    let mut x = [0.0f64; MAX_DIM];
    for _sweep in 0..max_sweeps {
        let mut max_change = 0.0f64;
        let mut max_abs = 1.0f64;
        for flat in 0..n_space {
            grid.unflatten(flat, &mut idx[..d]);
            grid.coords(&idx[..d], &mut x[..d]);
            let y_pred = prev[flat];
            let mut best = f64::INFINITY;
            let mut best_u = 0u32;
            for u_idx in 0..prob.controls.len() {
                // Gauss-Seidel: neighbor values read from the working slice.
                let (self_c, rest) = ctx.h_split(cur, flat, &idx[..d], &x[..d], u_idx, y_pred)?;
                let alpha = 1.0 - dt * self_c; // >= 1 for monotone self_c <= 0
                let rhs = y_pred + dt * rest;
                let unconstrained = rhs / alpha;
                let v = match (side, variant) {
                    (ObstacleSide::None, _) | (_, Variant::Projected) => {
                        let mut v = unconstrained;
                        if side != ObstacleSide::None {
                            let phi = prob.eval_obstacle(t, &x[..d])?;
                            v = match side {
                                ObstacleSide::Lower => v.max(phi),
                                ObstacleSide::Upper => v.min(phi),
                                ObstacleSide::None => v,
                            };
                        }
                        v
                    }
                    (s, Variant::Penalized(n)) => {
                        let phi = prob.eval_obstacle(t, &x[..d])?;
                        let c = n * dt;
                        match s {
                            ObstacleSide::Lower => {
                                if unconstrained >= phi {
                                    unconstrained
                                } else {
                                    (rhs + c * phi) / (alpha + c)
                                }
                            }
                            ObstacleSide::Upper => {
                                if unconstrained <= phi {
                                    unconstrained
                                } else {
                                    (rhs + c * phi) / (alpha + c)
                                }
                            }
                            ObstacleSide::None => unreachable!(),
                        }
                    }
                };
                if v < best {
                    best = v;
                    best_u = u_idx as u32;
                }
            }
            if !best.is_finite() {
                return Err(Error::NonFinite(format!("value at time step {k}, node {idx:?}")));
            }
            max_change = max_change.max((best - cur[flat]).abs());
            max_abs = max_abs.max(best.abs());
            cur[flat] = best;
            arg[flat] = best_u;
        }
        if max_change <= 1e-12 * max_abs {
            break;
        }
    }
    Ok(())
}

fn obstacle_step(
    prob: &ControlProblem,
    t: f64,
    x: &[f64],
    v: f64,
    dt: f64,
    side: ObstacleSide,
    variant: Variant,
) -> Result<f64> {
    if side == ObstacleSide::None {
        return Ok(v);
    }
    let phi = prob.eval_obstacle(t, x)?;
    Ok(match variant {
        Variant::Projected => match side {
            ObstacleSide::Lower => v.max(phi),
            ObstacleSide::Upper => v.min(phi),
            ObstacleSide::None => v,
        },
        Variant::Penalized(n) => {
            let c = n * dt;
            match side {
                ObstacleSide::Lower => {
                    if v >= phi {
                        v
                    } else {
                        (v + c * phi) / (1.0 + c)
                    }
                }
                ObstacleSide::Upper => {
                    if v <= phi {
                        v
                    } else {
                        (v + c * phi) / (1.0 + c)
                    }
                }
                ObstacleSide::None => v,
            }
        }
    })
}

/// Discrete value of `-dV/dt - inf_u H` at an interior, non-terminal node.
/// On the contact set of a projected solve this is the complementarity
/// residual rather than zero.
pub fn pde_residual(
    field: &ValueField,
    prob: &ControlProblem,
    time_idx: usize,
    space_idx: &[usize],
) -> Result<f64> {
    let grid = &field.grid;
    let d = grid.d();
    if time_idx >= grid.nt {
        return Err(Error::validation("node", "residual needs a non-terminal time node"));
    }
    for i in 0..d {
        if space_idx[i] == 0 || space_idx[i] + 1 >= grid.axes[i].nx {
            return Err(Error::validation("node", "residual needs an interior space node"));
        }
    }
    let flat = grid.flatten(space_idx);
    let n_space = grid.n_space();
    let t = grid.time_node(time_idx);
    let ctx = SliceCtx::new(prob, grid, t)?;
    let prev = &field.values[(time_idx + 1) * n_space..(time_idx + 2) * n_space];
    let y = prev[flat];
    let mut x = [0.0f64; MAX_DIM];
    grid.coords(space_idx, &mut x[..d]);
    let mut best = f64::INFINITY;
    for u_idx in 0..prob.controls.len() {
        let (self_c, rest) = ctx.h_split(prev, flat, space_idx, &x[..d], u_idx, y)?;
        best = best.min(self_c * y + rest);
    }
    let dvdt = (field.value(time_idx + 1, flat) - field.value(time_idx, flat)) / grid.dt();
    Ok(-dvdt - best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_coefficient, VarSpace};

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

    fn node_at(grid: &SpaceTimeGrid, x: f64) -> usize {
        ((x - grid.axes[0].lo) / grid.axes[0].dx()).round() as usize
    }

    #[test]
    fn cfl_validation() {
        let prob = prob_1d("0", "1", "0", "abs(x1)", None, ObstacleSide::None, 1.0);
        // dx = 0.01 -> dt bound = 1e-4; nt = 10^4 accepted.
        let g = build_grid(&[-4.0], &[4.0], &[801], 10_000, &prob, Scheme::Explicit).unwrap();
        assert!((g.explicit_dt_bound - 1e-4).abs() < 1e-9);
        // nt too small for explicit -> CFL error.
        let err = build_grid(&[-4.0], &[4.0], &[801], 100, &prob, Scheme::Explicit).unwrap_err();
        assert!(matches!(err, Error::Cfl(_)), "{err}");
        // Implicit scheme has no bound.
        assert!(build_grid(&[-4.0], &[4.0], &[801], 100, &prob, Scheme::ImplicitSweep).is_ok());
        // Minimal grid accepted with a resolution warning.
        let g = build_grid(&[-1.0], &[1.0], &[3], 100, &prob, Scheme::ImplicitSweep).unwrap();
        assert!(!g.warnings.is_empty());
        // Degenerate box rejected.
        assert!(build_grid(&[1.0], &[1.0], &[5], 10, &prob, Scheme::Explicit).is_err());
    }

    #[test]
    fn terminal_slice_is_exact() {
        let prob = prob_1d("0", "1", "0", "abs(x1)", None, ObstacleSide::None, 1.0);
        let g = build_grid(&[-2.0], &[2.0], &[41], 200, &prob, Scheme::Explicit).unwrap();
        let f = solve_hjb(&prob, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit)
            .unwrap();
        for j in 0..41 {
            let x = g.axes[0].node(j);
            assert_eq!(f.value(g.nt, j), x.abs());
        }
    }

    #[test]
    fn heat_equation_absolute_value() {
        // S1 on a moderate grid: V(0.5, 0) ~ sqrt(2/pi) sqrt(0.5).
        let prob = prob_1d("0", "1", "0", "abs(x1)", None, ObstacleSide::None, 1.0);
        let g = build_grid(&[-4.0], &[4.0], &[201], 640, &prob, Scheme::Explicit).unwrap();
        let f = solve_hjb(&prob, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit)
            .unwrap();
        let oracle = (2.0 / std::f64::consts::PI).sqrt() * 0.5f64.sqrt();
        let got = f.value(g.nt / 2, node_at(&g, 0.0));
        assert!((got - oracle).abs() < 5e-3, "{got} vs {oracle}");
    }

    #[test]
    fn constant_coefficient_obstacle_is_exact() {
        // b=sigma=0, f=-1, phi=0 lower, Phi=1, T=2:
        // V(t) = (1 - (T - t))^+ at every node, essentially exactly.
        let prob = prob_1d("0", "0", "-1", "1", Some("0"), ObstacleSide::Lower, 2.0);
        let g = build_grid(&[-1.0], &[1.0], &[5], 2000, &prob, Scheme::Explicit).unwrap();
        let f = solve_hjb(&prob, &g, ObstacleSide::Lower, Variant::Projected, Scheme::Explicit)
            .unwrap();
        let mut worst = 0.0f64;
        for k in 0..=g.nt {
            let t = g.time_node(k);
            let oracle = (1.0f64 - (2.0 - t)).max(0.0);
            for j in 0..5 {
                worst = worst.max((f.value(k, j) - oracle).abs());
                // Projection keeps the field on the right side of the
                // obstacle at every node, exactly.
                assert!(f.value(k, j) >= 0.0);
            }
        }
        assert!(worst <= 1e-10, "sup error {worst}");
    }

    #[test]
    fn reachability_with_controls() {
        // sigma=0, b=u, U={-1,0,1}, Phi=min(|x|,2), T=1:
        // V(t,x) = min((|x|-(T-t))^+, 2). CFL=1 makes upwinding exact.
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
        let g = build_grid(&[-4.0], &[4.0], &[201], 25, &prob, Scheme::Explicit).unwrap();
        let f = solve_hjb(&prob, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit)
            .unwrap();
        let dxdt = g.axes[0].dx() + g.dt();
        let mut worst = 0.0f64;
        for k in 0..=g.nt {
            let t = g.time_node(k);
            for j in 13..188 {
                // > 0.5 away from the walls
                let x = g.axes[0].node(j);
                let oracle = ((x.abs() - (1.0 - t)).max(0.0)).min(2.0);
                worst = worst.max((f.value(k, j) - oracle).abs());
            }
        }
        assert!(worst <= dxdt, "sup error {worst} vs {dxdt}");
    }

    #[test]
    fn residual_vanishes_off_contact() {
        let prob = prob_1d("0", "0", "-1", "1", Some("0"), ObstacleSide::Lower, 2.0);
        let g = build_grid(&[-1.0], &[1.0], &[5], 2000, &prob, Scheme::Explicit).unwrap();
        let f = solve_hjb(&prob, &g, ObstacleSide::Lower, Variant::Projected, Scheme::Explicit)
            .unwrap();
        // At t=1.5 (V = 0.5 > 0): residual ~ 0.
        let k = (1.5 / g.dt()).round() as usize;
        let r = pde_residual(&f, &prob, k, &[2]).unwrap();
        assert!(r.abs() <= 10.0 * g.dt(), "residual {r}");
        // At t=0.5 (contact): V - phi = 0 exactly.
        let k = (0.5 / g.dt()).round() as usize;
        assert_eq!(f.value(k, 2), 0.0);
        // Zero problem: residual identically zero.
        let zero = prob_1d("0", "0", "0", "0", None, ObstacleSide::None, 1.0);
        let g = build_grid(&[-1.0], &[1.0], &[9], 10, &zero, Scheme::Explicit).unwrap();
        let f = solve_hjb(&zero, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit)
            .unwrap();
        assert_eq!(pde_residual(&f, &zero, 5, &[4]).unwrap(), 0.0);
    }

    #[test]
    fn interpolation_nodes_and_midpoints() {
        let prob = prob_1d("0", "0", "0", "2*x1+1", None, ObstacleSide::None, 1.0);
        let g = build_grid(&[-1.0], &[1.0], &[21], 10, &prob, Scheme::Explicit).unwrap();
        let f = solve_hjb(&prob, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit)
            .unwrap();
        // Exact at a node.
        let x5 = g.axes[0].node(5);
        assert_eq!(f.interpolate(0.3, &[x5]).unwrap(), f.value(3, 5));
        // Midpoint of a linear field is the average of the nodes.
        let xa = g.axes[0].node(7);
        let xb = g.axes[0].node(8);
        let mid = f.interpolate(0.5, &[(xa + xb) / 2.0]).unwrap();
        assert!((mid - 0.5 * (f.value(5, 7) + f.value(5, 8))).abs() < 1e-12);
        // Out-of-hull queries error.
        assert!(f.interpolate(0.5, &[1.5]).is_err());
        assert!(f.interpolate(1.5, &[0.0]).is_err());
    }

    /// E|x + N(0, tau)| in closed form.
    fn folded_mean(x: f64, tau: f64) -> f64 {
        let sd = tau.sqrt();
        sd * (2.0 / std::f64::consts::PI).sqrt() * (-x * x / (2.0 * tau)).exp()
            + x * libm::erf(x / (sd * std::f64::consts::SQRT_2))
    }

    #[test]
    fn folded_mean_matches_quadrature() {
        // Independent Simpson quadrature check of the closed form.
        for (x, tau) in [(0.0f64, 0.5f64), (0.005, 0.5), (1.2, 0.25), (-0.7, 0.9)] {
            let sd = tau.sqrt();
            let pdf = |v: f64| {
                (-(v - x) * (v - x) / (2.0 * tau)).exp()
                    / (sd * (2.0 * std::f64::consts::PI).sqrt())
            };
            // Split at v = 0 so each Simpson panel integrates a smooth
            // function despite the |v| kink.
            let simpson = |lo: f64, hi: f64| {
                let n = 4000;
                let h = (hi - lo) / n as f64;
                let mut acc = 0.0;
                for i in 0..=n {
                    let v = lo + i as f64 * h;
                    let w = if i == 0 || i == n {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    acc += w * v.abs() * pdf(v);
                }
                acc * h / 3.0
            };
            let quad = simpson(x - 12.0 * sd, 0.0) + simpson(0.0, x + 12.0 * sd);
            assert!(
                (quad - folded_mean(x, tau)).abs() < 1e-10,
                "x={x}, tau={tau}: {quad} vs {}",
                folded_mean(x, tau)
            );
        }
    }

    #[test]
    fn interpolated_value_matches_gaussian_oracle() {
        let prob = prob_1d("0", "1", "0", "abs(x1)", None, ObstacleSide::None, 1.0);
        let g = build_grid(&[-4.0], &[4.0], &[201], 640, &prob, Scheme::Explicit).unwrap();
        let f = solve_hjb(&prob, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit)
            .unwrap();
        let got = f.interpolate(0.5, &[0.005]).unwrap();
        let oracle = folded_mean(0.005, 0.5);
        assert!((got - oracle).abs() < 5e-3, "{got} vs {oracle}");
    }

    #[test]
    fn monotone_in_terminal_data() {
        // 2-D problem with a genuine cross-diffusion term.
        let sp = VarSpace::new(2, 2, 0);
        let c = |s: &str| parse_coefficient(s, &sp).unwrap();
        let mk = |terminal: &str| {
            ControlProblem::uncontrolled(
                2,
                2,
                0.5,
                vec![c("0.3"), c("-0.2")],
                vec![c("1"), c("0.5"), c("0"), c("1")],
                c("-y/2"),
                c(terminal),
                None,
                ObstacleSide::None,
            )
            .unwrap()
        };
        let pa = mk("cos(x1)*cos(x2)");
        let pb = mk("cos(x1)*cos(x2)+0.1");
        let g = build_grid(&[-2.0, -2.0], &[2.0, 2.0], &[21, 21], 200, &pa, Scheme::Explicit)
            .unwrap();
        let fa =
            solve_hjb(&pa, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit).unwrap();
        let fb =
            solve_hjb(&pb, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit).unwrap();
        for (a, b) in fa.values.iter().zip(&fb.values) {
            assert!(b >= &(a - 1e-13), "monotonicity violated: {a} vs {b}");
        }
    }

    #[test]
    fn obstacle_ordering() {
        // phi_lower <= Phi <= phi_upper: V_lower >= V_none >= V_upper.
        let base = prob_1d("0", "1", "-y/2", "cos(x1)", None, ObstacleSide::None, 1.0);
        let lower = prob_1d("0", "1", "-y/2", "cos(x1)", Some("0.2"), ObstacleSide::Lower, 1.0);
        let upper = prob_1d("0", "1", "-y/2", "cos(x1)", Some("0.6"), ObstacleSide::Upper, 1.0);
        let g = build_grid(&[-3.0], &[3.0], &[61], 400, &base, Scheme::Explicit).unwrap();
        let vn =
            solve_hjb(&base, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit).unwrap();
        let vl = solve_hjb(&lower, &g, ObstacleSide::Lower, Variant::Projected, Scheme::Explicit)
            .unwrap();
        let vu = solve_hjb(&upper, &g, ObstacleSide::Upper, Variant::Projected, Scheme::Explicit)
            .unwrap();
        for i in 0..vn.values.len() {
            assert!(vl.values[i] >= vn.values[i] - 1e-13);
            assert!(vn.values[i] >= vu.values[i] - 1e-13);
        }
    }

    #[test]
    fn penalized_monotone_in_n_and_converges_to_projection() {
        let prob = prob_1d("0", "0", "-1", "1", Some("0"), ObstacleSide::Lower, 2.0);
        let g = build_grid(&[-1.0], &[1.0], &[5], 2000, &prob, Scheme::Explicit).unwrap();
        let proj = solve_hjb(&prob, &g, ObstacleSide::Lower, Variant::Projected, Scheme::Explicit)
            .unwrap();
        let mut prev_field: Option<ValueField> = None;
        let mut prev_gap = f64::NAN;
        for n in [64.0, 128.0, 256.0, 512.0] {
            let pen = solve_hjb(
                &prob,
                &g,
                ObstacleSide::Lower,
                Variant::Penalized(n),
                Scheme::Explicit,
            )
            .unwrap();
            // Exact monotonicity in n at every node.
            if let Some(prev) = &prev_field {
                for (lo, hi) in prev.values.iter().zip(&pen.values) {
                    assert!(hi >= &(lo - 1e-13));
                }
            }
            // Penalized below projected for the lower side.
            let gap = proj
                .values
                .iter()
                .zip(&pen.values)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0f64, f64::max);
            if prev_gap.is_finite() {
                let ratio = gap / prev_gap;
                assert!((0.3..=0.7).contains(&ratio), "n={n}: ratio {ratio}");
            }
            prev_gap = gap;
            prev_field = Some(pen);
        }
    }

    #[test]
    fn bounded_coefficients_bounded_value() {
        // |f|, |Phi| <= 1: |V| <= C0 (1 + T) with C0 = 1.
        let prob = prob_1d(
            "0.5*cos(x1)",
            "sin(x1)",
            "cos(t+x1)",
            "tanh(x1)",
            None,
            ObstacleSide::None,
            1.0,
        );
        let g = build_grid(&[-3.0], &[3.0], &[61], 500, &prob, Scheme::Explicit).unwrap();
        let f = solve_hjb(&prob, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit)
            .unwrap();
        let sup = f.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(sup <= 2.0 + 1e-12, "sup {sup}");
    }

    #[test]
    fn grid_refinement_shrinks_error_first_order() {
        // Refine dx by ~sqrt(2) and dt by 2 together: the S1 error at
        // (0.5, 0) should drop by roughly 2.
        let prob = prob_1d("0", "1", "0", "abs(x1)", None, ObstacleSide::None, 1.0);
        let oracle = (2.0 / std::f64::consts::PI).sqrt() * 0.5f64.sqrt();
        let err_at = |nx: usize, nt: usize| {
            let g = build_grid(&[-4.0], &[4.0], &[nx], nt, &prob, Scheme::Explicit).unwrap();
            let f = solve_hjb(&prob, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit)
                .unwrap();
            (f.value(nt / 2, (nx - 1) / 2) - oracle).abs()
        };
        let e1 = err_at(101, 313);
        let e2 = err_at(143, 630);
        let ratio = e1 / e2;
        assert!((1.5..=2.5).contains(&ratio), "errors {e1} / {e2}, ratio {ratio}");
    }

    #[test]
    fn implicit_sweep_handles_large_dt() {
        // Heat equation with dt far above the explicit bound stays stable
        // and accurate: V = exp(-(T-t)/2) cos x with f = 0? No: plain heat
        // u_t + u_xx/2 = 0 from cos x gives exp(-(T-t)/2) cos x.
        let prob = prob_1d("0", "1", "0", "cos(x1)", None, ObstacleSide::None, 0.25);
        let lo = -std::f64::consts::PI;
        let hi = std::f64::consts::PI;
        let g = build_grid(&[lo], &[hi], &[51], 10, &prob, Scheme::ImplicitSweep).unwrap();
        assert!(g.dt() > g.explicit_dt_bound);
        let f = solve_hjb(&prob, &g, ObstacleSide::None, Variant::Projected, Scheme::ImplicitSweep)
            .unwrap();
        let got = f.value(0, 25);
        let oracle = (-0.125f64).exp();
        assert!((got - oracle).abs() < 0.02, "{got} vs {oracle}");
        // Stiff penalty with implicit sweeps stays bounded.
        let obst = prob_1d("0", "0", "-1", "1", Some("0"), ObstacleSide::Lower, 2.0);
        let g = build_grid(&[-1.0], &[1.0], &[5], 50, &obst, Scheme::ImplicitSweep).unwrap();
        let f = solve_hjb(
            &obst,
            &g,
            ObstacleSide::Lower,
            Variant::Penalized(1e6),
            Scheme::ImplicitSweep,
        )
        .unwrap();
        let sup = f.values.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
        assert!(sup <= 1.0 + 1e-9, "sup {sup}");
    }

    #[test]
    fn problem_hash_tracks_semantics() {
        let a = prob_1d("0", "1", "0", "abs(x1)", None, ObstacleSide::None, 1.0);
        let b = prob_1d("0", "1", "0", "abs(x1)", None, ObstacleSide::None, 1.0);
        let c = prob_1d("0", "1", "0", "abs(x1)+0.1", None, ObstacleSide::None, 1.0);
        assert_eq!(problem_hash(&a), problem_hash(&b));
        assert_ne!(problem_hash(&a), problem_hash(&c));
    }
}
