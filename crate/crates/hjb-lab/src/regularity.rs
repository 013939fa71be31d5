//! Regularity estimators over value fields.
//!
//! Three constants are measured on `[0, T-delta] x box`:
//!
//! * joint Lipschitz: max of `|dV| / step` over adjacent node pairs in time
//!   and in each space direction (per-direction components are reported
//!   alongside the joint maximum);
//! * semiconcavity (linear modulus, midpoint form): max over grid-aligned
//!   symmetric triples `(p-h, p, p+h)` of
//!   `(V(p-h)/2 + V(p+h)/2 - V(p)) / (|2h|^2 / 4)`, floored at zero, with
//!   offsets drawn from a geometric ladder capped at 10% of each axis;
//! * Hoelder-in-time: max over node pairs within one spatial column of
//!   `|dV| / ((1 + |x|) sqrt(|dt|))`, with gaps from a geometric ladder plus
//!   every pair ending at the final node.
//!
//! The midpoint (lambda = 1/2) form of semiconcavity is equivalent to the
//! general-lambda inequality for continuous functions and keeps every test
//! point on the grid. Stability of a constant under resolution halving
//! (subsampling every other node) operationalizes "the constant exists";
//! growth under refinement flags a kink.

use crate::error::{Error, Result};
use crate::hjb::{SpaceTimeGrid, ValueField};
use crate::problem::MAX_DIM;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct NodePoint {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PairWitness {
    /// "t" or "x1".."xd".
    pub axis: String,
    pub a: NodePoint,
    pub b: NodePoint,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TripleWitness {
    pub center: NodePoint,
    pub dt_offset: f64,
    pub dx_offset: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzEstimate {
    #[serde(rename = "C")]
    pub c: f64,
    pub witness: Option<PairWitness>,
    /// Largest |dV|/dt over time-adjacent pairs only.
    pub time_component: f64,
    /// Largest |dV|/dx over space-adjacent pairs only.
    pub space_component: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SemiconcavityEstimate {
    #[serde(rename = "C")]
    pub c: f64,
    pub witness: Option<TripleWitness>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HolderEstimate {
    #[serde(rename = "C")]
    pub c: f64,
    pub witness: Option<PairWitness>,
}

fn geometric_ladder(max: usize) -> Vec<usize> {
    let mut ladder = Vec::new();
    let mut v = 1usize;
    while v <= max {
        ladder.push(v);
        v *= 2;
    }
    ladder
}

/// Largest time index whose node is still within `[0, T - delta]`.
fn restricted_t_max(grid: &SpaceTimeGrid, delta: f64) -> Result<usize> {
    if !(delta > grid.dt()) {
        return Err(Error::validation("delta", "must exceed the time step"));
    }
    let cutoff = grid.horizon - delta;
    let mut k = ((cutoff / grid.dt()) + 1e-9).floor() as usize;
    k = k.min(grid.nt);
    if grid.time_node(k) > cutoff + 1e-9 {
        if k == 0 {
            return Err(Error::validation("delta", "restricted region is empty"));
        }
        k -= 1;
    }
    Ok(k)
}

fn node_point(grid: &SpaceTimeGrid, k: usize, idx: &[usize]) -> NodePoint {
    let mut x = vec![0.0; grid.d()];
    grid.coords(idx, &mut x);
    NodePoint { t: grid.time_node(k), x }
}

fn spatially_interior(grid: &SpaceTimeGrid, idx: &[usize]) -> bool {
    idx.iter()
        .zip(&grid.axes)
        .all(|(j, ax)| *j >= 1 && j + 2 <= ax.nx)
}

/// Joint Lipschitz constant over adjacent node pairs of spatially interior
/// nodes, with both times restricted to `[0, T - delta]`.
pub fn lipschitz_constant(field: &ValueField, delta: f64) -> Result<LipschitzEstimate> {
    let grid = &field.grid;
    let d = grid.d();
    let t_max = restricted_t_max(grid, delta)?;
    let n_space = grid.n_space();
    let dt = grid.dt();

    struct Best {
        c: f64,
        axis: usize, // d = time axis
        k: usize,
        flat: usize,
    }
    let per_slice: Vec<Best> = (0..=t_max)
        .into_par_iter()
        .map(|k| {
            let mut best = Best { c: -1.0, axis: 0, k: 0, flat: 0 };
            let mut idx = [0usize; MAX_DIM];
            for flat in 0..n_space {
                grid.unflatten(flat, &mut idx[..d]);
                if !spatially_interior(grid, &idx[..d]) {
                    continue;
                }
                let v = field.value(k, flat);
                if k + 1 <= t_max {
                    let c = (field.value(k + 1, flat) - v).abs() / dt;
                    if c > best.c {
                        best = Best { c, axis: d, k, flat };
                    }
                }
                for i in 0..d {
                    if idx[i] + 2 < grid.axes[i].nx {
                        let c = (field.value(k, flat + grid.stride(i)) - v).abs()
                            / grid.axes[i].dx();
                        if c > best.c {
                            best = Best { c, axis: i, k, flat };
                        }
                    }
                }
            }
            best
        })
        .collect();

    let mut joint = Best { c: -1.0, axis: 0, k: 0, flat: 0 };
    for b in per_slice {
        if b.c > joint.c {
            joint = b;
        }
    }
    if joint.c < 0.0 {
        return Err(Error::validation("delta", "restricted region is empty"));
    }

    // Per-direction components (serial second pass; adjacent pairs only).
    let mut time_component = 0.0f64;
    let mut space_component = 0.0f64;
    let mut idx = [0usize; MAX_DIM];
    for k in 0..=t_max {
        for flat in 0..n_space {
            grid.unflatten(flat, &mut idx[..d]);
            if !spatially_interior(grid, &idx[..d]) {
                continue;
            }
            let v = field.value(k, flat);
            if k + 1 <= t_max {
                time_component = time_component.max((field.value(k + 1, flat) - v).abs() / dt);
            }
            for i in 0..d {
                if idx[i] + 2 < grid.axes[i].nx {
                    space_component = space_component
                        .max((field.value(k, flat + grid.stride(i)) - v).abs() / grid.axes[i].dx());
                }
            }
        }
    }

    let mut aidx = [0usize; MAX_DIM];
    grid.unflatten(joint.flat, &mut aidx[..d]);
    let a = node_point(grid, joint.k, &aidx[..d]);
    let (axis, b) = if joint.axis == d {
        ("t".to_string(), node_point(grid, joint.k + 1, &aidx[..d]))
    } else {
        let mut bidx = aidx;
        bidx[joint.axis] += 1;
        (format!("x{}", joint.axis + 1), node_point(grid, joint.k, &bidx[..d]))
    };
    Ok(LipschitzEstimate {
        c: joint.c,
        witness: Some(PairWitness { axis, a, b }),
        time_component,
        space_component,
    })
}

/// Midpoint semiconcavity constant over symmetric grid triples.
pub fn semiconcavity_constant(field: &ValueField, delta: f64) -> Result<SemiconcavityEstimate> {
    let grid = &field.grid;
    let d = grid.d();
    let t_max = restricted_t_max(grid, delta)?;
    let n_space = grid.n_space();
    let dt = grid.dt();

    // Offsets: pure time, pure space per axis, mixed time-space (both sign
    // combinations), and space-space pairs; geometric ladders capped at 10%
    // of each axis.
    let t_ladder = geometric_ladder((grid.nt / 10).max(1));
    let mut offsets: Vec<(usize, [isize; MAX_DIM])> = Vec::new();
    for &jt in &t_ladder {
        offsets.push((jt, [0; MAX_DIM]));
    }
    for i in 0..d {
        let ladder = geometric_ladder(((grid.axes[i].nx - 1) / 10).max(1));
        for &kx in &ladder {
            let mut dx = [0isize; MAX_DIM];
            dx[i] = kx as isize;
            offsets.push((0, dx));
            for &jt in &t_ladder {
                offsets.push((jt, dx));
                let mut dxm = [0isize; MAX_DIM];
                dxm[i] = -(kx as isize);
                offsets.push((jt, dxm));
            }
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let li = geometric_ladder(((grid.axes[i].nx - 1) / 10).max(1));
            let lj = geometric_ladder(((grid.axes[j].nx - 1) / 10).max(1));
            for &ki in &li {
                for &kj in &lj {
                    let mut dx = [0isize; MAX_DIM];
                    dx[i] = ki as isize;
                    dx[j] = kj as isize;
                    offsets.push((0, dx));
                    dx[j] = -(kj as isize);
                    offsets.push((0, dx));
                }
            }
        }
    }

    struct Best {
        val: f64,
        k: usize,
        flat: usize,
        off: usize,
    }
    let per_slice: Vec<Best> = (0..=t_max)
        .into_par_iter()
        .map(|k| {
            let mut best = Best { val: 0.0, k: 0, flat: 0, off: usize::MAX };
            let mut idx = [0usize; MAX_DIM];
            for flat in 0..n_space {
                grid.unflatten(flat, &mut idx[..d]);
                if !spatially_interior(grid, &idx[..d]) {
                    continue;
                }
                let center = field.value(k, flat);
                'off: for (oi, (jt, dx)) in offsets.iter().enumerate() {
                    if *jt > k || k + jt > t_max {
                        continue;
                    }
                    let mut flat_p = flat;
                    let mut flat_m = flat;
                    let mut h2 = (*jt as f64 * dt) * (*jt as f64 * dt);
                    for i in 0..d {
                        let o = dx[i];
                        if o == 0 {
                            continue;
                        }
                        let oa = o.unsigned_abs();
                        if idx[i] + oa + 1 >= grid.axes[i].nx || idx[i] < oa + 1 {
                            continue 'off;
                        }
                        let step = oa * grid.stride(i);
                        if o > 0 {
                            flat_p += step;
                            flat_m -= step;
                        } else {
                            flat_p -= step;
                            flat_m += step;
                        }
                        let w = oa as f64 * grid.axes[i].dx();
                        h2 += w * w;
                    }
                    let up = field.value(k + jt, flat_p);
                    let dn = field.value(k - jt, flat_m);
                    let val = (0.5 * up + 0.5 * dn - center) / h2;
                    if val > best.val {
                        best = Best { val, k, flat, off: oi };
                    }
                }
            }
            best
        })
        .collect();

    let mut top = Best { val: 0.0, k: 0, flat: 0, off: usize::MAX };
    for b in per_slice {
        if b.val > top.val {
            top = b;
        }
    }
    let witness = if top.off == usize::MAX {
        None
    } else {
        let (jt, dx) = &offsets[top.off];
        let mut idx = [0usize; MAX_DIM];
        grid.unflatten(top.flat, &mut idx[..d]);
        Some(TripleWitness {
            center: node_point(grid, top.k, &idx[..d]),
            dt_offset: *jt as f64 * dt,
            dx_offset: (0..d).map(|i| dx[i] as f64 * grid.axes[i].dx()).collect(),
        })
    };
    Ok(SemiconcavityEstimate { c: top.val.max(0.0), witness })
}

/// Hoelder-in-time constant along one spatial column:
/// `max |V(t,x) - V(t',x)| / ((1+|x|) sqrt(|t-t'|))`.
pub fn holder_time_constant(field: &ValueField, space_idx: &[usize]) -> Result<HolderEstimate> {
    let grid = &field.grid;
    let d = grid.d();
    if space_idx.len() != d {
        return Err(Error::validation("x_slice", "index must match the dimension"));
    }
    for i in 0..d {
        if space_idx[i] >= grid.axes[i].nx {
            return Err(Error::validation("x_slice", "index out of range"));
        }
    }
    let flat = grid.flatten(space_idx);
    let mut x = vec![0.0; d];
    grid.coords(space_idx, &mut x);
    let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let weight = 1.0 + xnorm;
    let dt = grid.dt();
    let gaps = geometric_ladder(grid.nt);

    let mut best = (0.0f64, 0usize, 0usize);
    let mut consider = |k1: usize, k2: usize| {
        let dv = (field.value(k2, flat) - field.value(k1, flat)).abs();
        let c = dv / (weight * ((k2 - k1) as f64 * dt).sqrt());
        if c > best.0 {
            best = (c, k1, k2);
        }
    };
    for k in 0..=grid.nt {
        for &g in &gaps {
            if k + g <= grid.nt {
                consider(k, k + g);
            }
        }
        if k < grid.nt {
            consider(k, grid.nt);
        }
    }
    let witness = if best.0 > 0.0 {
        Some(PairWitness {
            axis: "t".into(),
            a: node_point(grid, best.1, space_idx),
            b: node_point(grid, best.2, space_idx),
        })
    } else {
        None
    };
    Ok(HolderEstimate { c: best.0, witness })
}

/// Hoelder constant maximized over the spatially interior columns.
pub fn holder_time_constant_global(field: &ValueField) -> Result<HolderEstimate> {
    let grid = &field.grid;
    let d = grid.d();
    let n_space = grid.n_space();
    let results: Result<Vec<HolderEstimate>> = (0..n_space)
        .into_par_iter()
        .map(|flat| {
            let mut idx = [0usize; MAX_DIM];
            grid.unflatten(flat, &mut idx[..d]);
            if !spatially_interior(grid, &idx[..d]) {
                return Ok(HolderEstimate { c: -1.0, witness: None });
            }
            holder_time_constant(field, &idx[..d])
        })
        .collect();
    let mut best = HolderEstimate { c: -1.0, witness: None };
    for est in results? {
        if est.c > best.c {
            best = est;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// closed-form oracles

/// Closed-form benchmark solutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleId {
    /// Uncontrolled heat flow of |x|: `V(t,x) = E|x + N(0, T-t)|`.
    Ex21 { horizon: f64 },
    /// Constant-coefficient lower obstacle: `V(t,x) = (1 - (T-t))^+`.
    Ex31 { horizon: f64 },
    /// Smooth upper-obstacle benchmark: `V(t,x) = exp(-(T-t)) cos x`.
    SmoothUpper { horizon: f64 },
    /// Deterministic reachability: `V(t,x) = min((|x| - (T-t))^+, 2)`.
    ReachControl { horizon: f64 },
}

impl OracleId {
    pub fn parse(name: &str, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::validation("T", "oracle horizon must be positive"));
        }
        Ok(match name {
            "ex2_1" => OracleId::Ex21 { horizon },
            "ex3_1" => OracleId::Ex31 { horizon },
            "smooth_upper" => OracleId::SmoothUpper { horizon },
            "reach_control" => OracleId::ReachControl { horizon },
            other => {
                return Err(Error::validation(
                    "oracle",
                    format!("unknown oracle {other:?} (ex2_1, ex3_1, smooth_upper, reach_control)"),
                ))
            }
        })
    }

    pub fn horizon(&self) -> f64 {
        match self {
            OracleId::Ex21 { horizon }
            | OracleId::Ex31 { horizon }
            | OracleId::SmoothUpper { horizon }
            | OracleId::ReachControl { horizon } => *horizon,
        }
    }
}

/// Mean of |mu + N(0, var)| in closed form.
pub fn folded_normal_mean(mu: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return mu.abs();
    }
    let sd = var.sqrt();
    sd * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * var)).exp()
        + mu * libm::erf(mu / (sd * std::f64::consts::SQRT_2))
}

/// Evaluates a closed-form oracle at `(t, x)` (scalar state).
pub fn oracle_value(id: OracleId, t: f64, x: f64) -> Result<f64> {
    let horizon = id.horizon();
    if t > horizon + 1e-12 {
        return Err(Error::OutOfDomain(format!("t = {t} beyond horizon {horizon}")));
    }
    let tau = (horizon - t).max(0.0);
    Ok(match id {
        OracleId::Ex21 { .. } => folded_normal_mean(x, tau),
        OracleId::Ex31 { .. } => (1.0 - tau).max(0.0),
        OracleId::SmoothUpper { .. } => (-tau).exp() * x.cos(),
        OracleId::ReachControl { .. } => (x.abs() - tau).max(0.0).min(2.0),
    })
}

// ---------------------------------------------------------------------------
// the report

#[derive(Debug, Clone, Serialize)]
pub struct RefinementDiag {
    /// Constants re-estimated at half resolution (every other node).
    pub lipschitz_c: f64,
    pub semiconcavity_c: f64,
    pub holder_c: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdicts {
    pub lipschitz_stable: bool,
    pub semiconcave_stable: bool,
    pub semiconcave_diverging: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaReport {
    pub delta: f64,
    pub lipschitz: LipschitzEstimate,
    pub semiconcavity: SemiconcavityEstimate,
    pub holder: HolderEstimate,
    pub refinement: RefinementDiag,
    pub verdicts: Verdicts,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub problem_hash: u64,
    pub deltas: Vec<DeltaReport>,
}

/// Subsamples every other node in time and every space dimension. An odd
/// node count drops the trailing node (the horizon shrinks by one step).
pub fn subsample_field(field: &ValueField) -> ValueField {
    let grid = &field.grid;
    let d = grid.d();
    let nt_half = grid.nt / 2;
    let axes: Vec<crate::hjb::AxisSpec> = grid
        .axes
        .iter()
        .map(|a| {
            let n_half = (a.nx - 1) / 2 + 1;
            crate::hjb::AxisSpec { lo: a.lo, hi: a.node(2 * (n_half - 1)), nx: n_half }
        })
        .collect();
    let sub = SpaceTimeGrid {
        horizon: grid.time_node(2 * nt_half),
        nt: nt_half,
        axes,
        explicit_dt_bound: grid.explicit_dt_bound,
        warnings: Vec::new(),
    };
    let n_sub = sub.n_space();
    let mut values = vec![0.0; (nt_half + 1) * n_sub];
    let mut argmin = vec![0u32; (nt_half + 1) * n_sub];
    let mut sidx = [0usize; MAX_DIM];
    let mut fidx = [0usize; MAX_DIM];
    for k in 0..=nt_half {
        for flat in 0..n_sub {
            sub.unflatten(flat, &mut sidx[..d]);
            for i in 0..d {
                fidx[i] = 2 * sidx[i];
            }
            let src = grid.flatten(&fidx[..d]);
            values[k * n_sub + flat] = field.value(2 * k, src);
            argmin[k * n_sub + flat] = field.argmin[2 * k * grid.n_space() + src];
        }
    }
    ValueField {
        grid: sub,
        values,
        argmin,
        scheme: field.scheme,
        variant: field.variant,
        side: field.side,
        problem_hash: field.problem_hash,
    }
}

const VERDICT_FLOOR: f64 = 1e-12;

/// Runs the three estimators at every `delta` at full and half resolution
/// and attaches stability verdicts: a constant is stable when it moves by
/// at most 25% between resolutions, and semiconcavity is flagged diverging
/// when refinement grows it by at least 60%.
pub fn regularity_report(field: &ValueField, deltas: &[f64]) -> Result<RegularityReport> {
    if deltas.is_empty() {
        return Err(Error::validation("deltas", "need at least one delta"));
    }
    let half = subsample_field(field);
    let mut out = Vec::new();
    for &delta in deltas {
        if !(delta > 2.0 * field.grid.dt()) {
            return Err(Error::validation(
                "delta",
                format!("delta {delta} must exceed twice the time step"),
            ));
        }
        let lip = lipschitz_constant(field, delta)?;
        let semi = semiconcavity_constant(field, delta)?;
        let hold = holder_time_constant_global(field)?;
        let lip_h = lipschitz_constant(&half, delta)?;
        let semi_h = semiconcavity_constant(&half, delta)?;
        let hold_h = holder_time_constant_global(&half)?;
        let stable = |full: f64, coarse: f64| (full - coarse).abs() <= 0.25 * coarse.max(VERDICT_FLOOR);
        let verdicts = Verdicts {
            lipschitz_stable: stable(lip.c, lip_h.c),
            semiconcave_stable: stable(semi.c, semi_h.c),
            semiconcave_diverging: semi.c >= 1.6 * semi_h.c && semi.c > VERDICT_FLOOR,
        };
        out.push(DeltaReport {
            delta,
            lipschitz: lip,
            semiconcavity: semi,
            holder: hold,
            refinement: RefinementDiag {
                lipschitz_c: lip_h.c,
                semiconcavity_c: semi_h.c,
                holder_c: hold_h.c,
            },
            verdicts,
        });
    }
    Ok(RegularityReport { problem_hash: field.problem_hash, deltas: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_coefficient, VarSpace};
    use crate::hjb::{build_grid, solve_hjb, AxisSpec, Scheme, Variant};
    use crate::problem::{ControlProblem, ObstacleSide};
    use std::sync::OnceLock;

    fn c1(text: &str) -> crate::expr::CoefficientExpr {
        parse_coefficient(text, &VarSpace::new(1, 1, 0)).unwrap()
    }

    /// Synthetic field from a closure, on [0, T] x [lo, hi].
    fn synthetic(
        horizon: f64,
        nt: usize,
        lo: f64,
        hi: f64,
        nx: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> ValueField {
        let grid = SpaceTimeGrid {
            horizon,
            nt,
            axes: vec![AxisSpec { lo, hi, nx }],
            explicit_dt_bound: f64::INFINITY,
            warnings: Vec::new(),
        };
        let mut values = vec![0.0; (nt + 1) * nx];
        for k in 0..=nt {
            for j in 0..nx {
                values[k * nx + j] = f(grid.time_node(k), grid.axes[0].node(j));
            }
        }
        ValueField {
            grid,
            argmin: vec![0; (nt + 1) * nx],
            values,
            scheme: Scheme::Explicit,
            variant: Variant::Projected,
            side: ObstacleSide::None,
            problem_hash: 0,
        }
    }

    fn s1_field() -> &'static ValueField {
        static FIELD: OnceLock<ValueField> = OnceLock::new();
        FIELD.get_or_init(|| {
            let prob = ControlProblem::uncontrolled(
                1,
                1,
                1.0,
                vec![c1("0")],
                vec![c1("1")],
                c1("0"),
                c1("abs(x1)"),
                None,
                ObstacleSide::None,
            )
            .unwrap();
            let g = build_grid(&[-4.0], &[4.0], &[201], 1250, &prob, Scheme::Explicit).unwrap();
            solve_hjb(&prob, &g, ObstacleSide::None, Variant::Projected, Scheme::Explicit).unwrap()
        })
    }

    fn s2_field() -> &'static ValueField {
        static FIELD: OnceLock<ValueField> = OnceLock::new();
        FIELD.get_or_init(|| {
            let prob = ControlProblem::uncontrolled(
                1,
                1,
                2.0,
                vec![c1("0")],
                vec![c1("0")],
                c1("-1"),
                c1("1"),
                Some(c1("0")),
                ObstacleSide::Lower,
            )
            .unwrap();
            let g = build_grid(&[-1.0], &[1.0], &[5], 2000, &prob, Scheme::Explicit).unwrap();
            solve_hjb(&prob, &g, ObstacleSide::Lower, Variant::Projected, Scheme::Explicit)
                .unwrap()
        })
    }

    fn s3_field() -> &'static ValueField {
        static FIELD: OnceLock<ValueField> = OnceLock::new();
        FIELD.get_or_init(|| {
            let prob = ControlProblem::uncontrolled(
                1,
                1,
                1.0,
                vec![c1("0")],
                vec![c1("1")],
                c1("-y/2"),
                c1("cos(x1)"),
                Some(c1("10")),
                ObstacleSide::Upper,
            )
            .unwrap();
            let pi = std::f64::consts::PI;
            let g = build_grid(&[-pi], &[pi], &[201], 1040, &prob, Scheme::Explicit).unwrap();
            solve_hjb(&prob, &g, ObstacleSide::Upper, Variant::Projected, Scheme::Explicit)
                .unwrap()
        })
    }

    #[test]
    fn constant_field_all_zero() {
        let f = synthetic(1.0, 40, -1.0, 1.0, 21, |_, _| 3.25);
        assert_eq!(lipschitz_constant(&f, 0.25).unwrap().c, 0.0);
        assert_eq!(semiconcavity_constant(&f, 0.25).unwrap().c, 0.0);
        assert_eq!(holder_time_constant(&f, &[10]).unwrap().c, 0.0);
        let rep = regularity_report(&f, &[0.25]).unwrap();
        let d = &rep.deltas[0];
        assert!(d.verdicts.lipschitz_stable);
        assert!(d.verdicts.semiconcave_stable);
        assert!(!d.verdicts.semiconcave_diverging);
    }

    #[test]
    fn affine_field_not_semiconcave_positive() {
        let f = synthetic(1.0, 40, -1.0, 1.0, 21, |t, x| 0.7 * t - 1.3 * x + 0.2);
        assert!(semiconcavity_constant(&f, 0.2).unwrap().c < 1e-12);
        let lip = lipschitz_constant(&f, 0.2).unwrap();
        assert!((lip.c - 1.3).abs() < 1e-9, "{}", lip.c);
        assert!((lip.time_component - 0.7).abs() < 1e-9);
    }

    #[test]
    fn s1_time_blowup_law() {
        let field = s1_field();
        let root_2_pi = (2.0 / std::f64::consts::PI).sqrt();
        let l25 = lipschitz_constant(field, 0.25).unwrap();
        let expected = root_2_pi / (2.0 * 0.25f64.sqrt());
        assert!(
            (l25.time_component - expected).abs() < 0.1 * expected,
            "{} vs {expected}",
            l25.time_component
        );
        // The joint constant saturates at the terminal data's spatial
        // Lipschitz constant (about 1), which masks the time blow-up.
        assert!(l25.c >= l25.time_component - 1e-12);
        assert!((l25.space_component - 1.0).abs() < 0.05, "{}", l25.space_component);

        let l0625 = lipschitz_constant(field, 0.0625).unwrap();
        let ratio = l0625.time_component / l25.time_component;
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");

        // delta^(-1/2) law: C_time(delta) sqrt(delta) constant within 15%.
        let l015 = lipschitz_constant(field, 0.015625).unwrap();
        let products = [
            l25.time_component * 0.25f64.sqrt(),
            l0625.time_component * 0.0625f64.sqrt(),
            l015.time_component * 0.015625f64.sqrt(),
        ];
        let mean = products.iter().sum::<f64>() / 3.0;
        for p in products {
            assert!((p - mean).abs() <= 0.15 * mean, "{products:?}");
        }
        // Monotone in delta.
        assert!(l0625.c >= l25.c - 1e-12);
        assert!(l015.c >= l0625.c - 1e-12);
    }

    #[test]
    fn s1_holder_constant_bounded() {
        let field = s1_field();
        let est = holder_time_constant(field, &[100]).unwrap(); // x = 0 column
        assert!(est.c <= 0.85, "{}", est.c);
        assert!(est.c > 0.5, "{}", est.c);
    }

    #[test]
    fn s2_holder_trivially_bounded() {
        let field = s2_field();
        let est = holder_time_constant(field, &[2]).unwrap();
        assert!(est.c <= 2.0f64.sqrt(), "{}", est.c);
    }

    #[test]
    fn s2_semiconcavity_diverges() {
        let field = s2_field();
        let dt = field.grid.dt();
        let est = semiconcavity_constant(field, 0.5).unwrap();
        let expected = 1.0 / (2.0 * dt);
        assert!(
            (est.c - expected).abs() <= 0.1 * expected,
            "{} vs {expected}",
            est.c
        );
        let w = est.witness.unwrap();
        assert!((w.center.t - 1.0).abs() < 2.0 * dt, "kink witness at {}", w.center.t);
        let rep = regularity_report(field, &[0.5]).unwrap();
        assert!(rep.deltas[0].verdicts.semiconcave_diverging);
        assert!(!rep.deltas[0].verdicts.semiconcave_stable);
    }

    #[test]
    fn s3_semiconcavity_small_and_stable() {
        let field = s3_field();
        for delta in [0.1, 0.25] {
            let est = semiconcavity_constant(field, delta).unwrap();
            assert!(est.c <= 0.55, "delta {delta}: {}", est.c);
            assert!(est.c >= 0.2, "delta {delta}: {}", est.c);
        }
        let rep = regularity_report(field, &[0.1, 0.25]).unwrap();
        for d in &rep.deltas {
            assert!(d.verdicts.semiconcave_stable, "delta {}", d.delta);
            assert!(!d.verdicts.semiconcave_diverging);
        }
    }

    #[test]
    fn negation_swaps_concavity_for_convexity() {
        let field = s3_field();
        let neg = synthetic(1.0, field.grid.nt, -std::f64::consts::PI, std::f64::consts::PI, 201, |_, _| 0.0);
        let mut neg = ValueField { values: field.values.clone(), ..neg };
        for v in neg.values.iter_mut() {
            *v = -*v;
        }
        let pos_est = semiconcavity_constant(field, 0.25).unwrap().c;
        let neg_est = semiconcavity_constant(&neg, 0.25).unwrap().c;
        // For V = exp(-(T-t)) cos x the Hessian spectrum is symmetric, so
        // both bounds are close and both at most 1/2 + O(h^2).
        assert!(neg_est <= 0.55, "{neg_est}");
        assert!((pos_est - neg_est).abs() <= 0.15 * pos_est.max(neg_est));
        // Lipschitz constant is invariant under negation.
        let lp = lipschitz_constant(field, 0.25).unwrap().c;
        let ln = lipschitz_constant(&neg, 0.25).unwrap().c;
        assert!((lp - ln).abs() < 1e-12);
    }

    #[test]
    fn shift_and_scale_behavior() {
        let field = s2_field();
        let shifted = ValueField {
            values: field.values.iter().map(|v| v + 5.0).collect(),
            ..field.clone()
        };
        let scaled = ValueField {
            values: field.values.iter().map(|v| v * 3.0).collect(),
            ..field.clone()
        };
        let delta = 0.5;
        let l0 = lipschitz_constant(field, delta).unwrap().c;
        let s0 = semiconcavity_constant(field, delta).unwrap().c;
        let h0 = holder_time_constant(field, &[2]).unwrap().c;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        assert!(close(lipschitz_constant(&shifted, delta).unwrap().c, l0));
        assert!(close(semiconcavity_constant(&shifted, delta).unwrap().c, s0));
        assert!(close(holder_time_constant(&shifted, &[2]).unwrap().c, h0));
        assert!((lipschitz_constant(&scaled, delta).unwrap().c - 3.0 * l0).abs() < 1e-9);
        assert!((semiconcavity_constant(&scaled, delta).unwrap().c - 3.0 * s0).abs() < 1e-9);
        assert!((holder_time_constant(&scaled, &[2]).unwrap().c - 3.0 * h0).abs() < 1e-9);
    }

    #[test]
    fn oracle_values() {
        let ex21 = OracleId::parse("ex2_1", 1.0).unwrap();
        assert_eq!(oracle_value(ex21, 1.0, 0.0).unwrap(), 0.0);
        let v = oracle_value(ex21, 0.5, 0.0).unwrap();
        assert!((v - 0.5641895835).abs() < 1e-9, "{v}");
        let ex31 = OracleId::parse("ex3_1", 2.0).unwrap();
        assert_eq!(oracle_value(ex31, 1.5, 7.0).unwrap(), 0.5);
        assert_eq!(oracle_value(ex31, 0.5, -3.0).unwrap(), 0.0);
        let su = OracleId::parse("smooth_upper", 1.0).unwrap();
        assert!((oracle_value(su, 0.0, 0.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let rc = OracleId::parse("reach_control", 1.0).unwrap();
        assert_eq!(oracle_value(rc, 0.0, 1.5).unwrap(), 0.5);
        assert_eq!(oracle_value(rc, 0.0, 3.5).unwrap(), 2.0);
        assert!(oracle_value(ex21, 1.5, 0.0).is_err());
        assert!(OracleId::parse("nope", 1.0).is_err());
    }

    #[test]
    fn delta_must_exceed_time_step() {
        let f = synthetic(1.0, 10, -1.0, 1.0, 11, |t, x| t + x);
        assert!(lipschitz_constant(&f, 0.05).is_err());
        assert!(regularity_report(&f, &[0.15]).is_err());
        assert!(regularity_report(&f, &[]).is_err());
    }
}
