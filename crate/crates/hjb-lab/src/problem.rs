//! Control-problem definition and the Hamiltonian.
//!
//! A problem is the coefficient tuple (b, sigma, f, Phi, phi) over expression
//! trees, together with the horizon, dimensions, obstacle side and a finite
//! control grid. The Hamiltonian is
//!
//! ```text
//! H(t,x,y,p,A,u) = 1/2 tr(sigma sigma^T(t,x,u) A) + b(t,x,u).p + f(t,x,y,p sigma(t,x,u),u)
//! ```
//!
//! and the equation's infimum over controls is an exact enumeration of the
//! control grid (ties break to the lowest index).

use crate::error::{Error, Result};
use crate::expr::{CoefficientExpr, EvalEnv, USES_U, USES_Y, USES_Z};
use crate::rng;
use serde::Serialize;

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ObstacleSide {
    None,
    Lower,
    Upper,
}

impl std::fmt::Display for ObstacleSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObstacleSide::None => "none",
            ObstacleSide::Lower => "lower",
            ObstacleSide::Upper => "upper",
        })
    }
}

/// Immutable control problem. Construct via [`ControlProblem::new`], which
/// validates dimensions and variable usage.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub d: usize,
    pub m: usize,
    /// Control-space dimension.
    pub k: usize,
    pub horizon: f64,
    /// Drift, length `d`.
    pub drift: Vec<CoefficientExpr>,
    /// Diffusion, row-major `d x m`.
    pub diffusion: Vec<CoefficientExpr>,
    pub driver: CoefficientExpr,
    pub terminal: CoefficientExpr,
    pub obstacle: Option<CoefficientExpr>,
    pub obstacle_side: ObstacleSide,
    /// Finite control grid; each point has length `k`.
    pub controls: Vec<Vec<f64>>,
}

impl ControlProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        m: usize,
        horizon: f64,
        drift: Vec<CoefficientExpr>,
        diffusion: Vec<CoefficientExpr>,
        driver: CoefficientExpr,
        terminal: CoefficientExpr,
        obstacle: Option<CoefficientExpr>,
        obstacle_side: ObstacleSide,
        controls: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return Err(Error::validation("d", format!("must be 1..={MAX_DIM}, got {d}")));
        }
        if m == 0 || m > MAX_DIM {
            return Err(Error::validation("m", format!("must be 1..={MAX_DIM}, got {m}")));
        }
        if !(horizon > 0.0) {
            return Err(Error::validation("T", "horizon must be positive"));
        }
        if drift.len() != d {
            return Err(Error::validation("b", format!("expected {d} entries, got {}", drift.len())));
        }
        if diffusion.len() != d * m {
            return Err(Error::validation(
                "sigma",
                format!("expected {d}x{m} = {} entries, got {}", d * m, diffusion.len()),
            ));
        }
        if controls.is_empty() {
            return Err(Error::validation("controls", "control grid must be nonempty"));
        }
        let k = controls[0].len();
        if controls.iter().any(|p| p.len() != k) {
            return Err(Error::validation("controls", "control points have mixed lengths"));
        }
        match (obstacle_side, &obstacle) {
            (ObstacleSide::None, Some(_)) => {
                return Err(Error::validation("obstacle", "side is none but an obstacle is given"))
            }
            (ObstacleSide::Lower | ObstacleSide::Upper, None) => {
                return Err(Error::validation("obstacle", "obstacle side set but no expression"))
            }
            _ => {}
        }
        for (name, exprs, forbidden) in [
            ("b", &drift[..], USES_Y | USES_Z),
            ("sigma", &diffusion[..], USES_Y | USES_Z),
        ] {
            if exprs.iter().any(|c| c.uses(forbidden)) {
                return Err(Error::validation(name, "may depend on (t, x, u) only"));
            }
        }
        if terminal.uses(USES_Y | USES_Z | USES_U | crate::expr::USES_T) {
            return Err(Error::validation("Phi", "terminal condition may depend on x only"));
        }
        if let Some(phi) = &obstacle {
            if phi.uses(USES_Y | USES_Z | USES_U) {
                return Err(Error::validation("phi", "obstacle may depend on (t, x) only"));
            }
        }
        Ok(ControlProblem {
            d,
            m,
            k,
            horizon,
            drift,
            diffusion,
            driver,
            terminal,
            obstacle,
            obstacle_side,
            controls,
        })
    }

    /// Simple uncontrolled problem (singleton control grid).
    #[allow(clippy::too_many_arguments)]
    pub fn uncontrolled(
        d: usize,
        m: usize,
        horizon: f64,
        drift: Vec<CoefficientExpr>,
        diffusion: Vec<CoefficientExpr>,
        driver: CoefficientExpr,
        terminal: CoefficientExpr,
        obstacle: Option<CoefficientExpr>,
        obstacle_side: ObstacleSide,
    ) -> Result<Self> {
        ControlProblem::new(
            d,
            m,
            horizon,
            drift,
            diffusion,
            driver,
            terminal,
            obstacle,
            obstacle_side,
            vec![vec![]],
        )
    }

    /// Evaluates the drift vector into `out` (length `d`).
    pub fn eval_drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let env = EvalEnv { t, x, y: 0.0, z: &[], u };
        for (o, e) in out.iter_mut().zip(&self.drift) {
            *o = e.eval(&env)?;
        }
        Ok(())
    }

    /// Evaluates the diffusion matrix row-major into `out` (length `d*m`).
    pub fn eval_diffusion(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let env = EvalEnv { t, x, y: 0.0, z: &[], u };
        for (o, e) in out.iter_mut().zip(&self.diffusion) {
            *o = e.eval(&env)?;
        }
        Ok(())
    }

    pub fn eval_driver(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> Result<f64> {
        self.driver.eval(&EvalEnv { t, x, y, z, u })
    }

    pub fn eval_terminal(&self, x: &[f64]) -> Result<f64> {
        self.terminal.eval(&EvalEnv::state(0.0, x))
    }

    pub fn eval_obstacle(&self, t: f64, x: &[f64]) -> Result<f64> {
        match &self.obstacle {
            Some(phi) => phi.eval(&EvalEnv::state(t, x)),
            None => Err(Error::validation("phi", "problem has no obstacle")),
        }
    }
}

/// Argument bundle for a pointwise Hamiltonian evaluation.
#[derive(Debug, Clone)]
pub struct HamiltonianInput<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    /// Gradient, length `d`.
    pub p: &'a [f64],
    /// Symmetric `d x d` matrix, row-major.
    pub a: &'a [f64],
    /// Control point, length `k`.
    pub u: &'a [f64],
}

const SYM_TOL: f64 = 1e-12;

/// H(t,x,y,p,A,u). Errors if `A` is not symmetric within 1e-12 or an
/// expression evaluation fails.
pub fn hamiltonian(prob: &ControlProblem, input: &HamiltonianInput) -> Result<f64> {
    let d = prob.d;
    let m = prob.m;
    debug_assert_eq!(input.x.len(), d);
    debug_assert_eq!(input.p.len(), d);
    debug_assert_eq!(input.a.len(), d * d);
    for i in 0..d {
        for j in (i + 1)..d {
            if (input.a[i * d + j] - input.a[j * d + i]).abs() > SYM_TOL {
                return Err(Error::validation("A", "matrix is not symmetric within 1e-12"));
            }
        }
    }
    let mut sig = [0.0; MAX_DIM * MAX_DIM];
    prob.eval_diffusion(input.t, input.x, input.u, &mut sig[..d * m])?;
    let mut b = [0.0; MAX_DIM];
    prob.eval_drift(input.t, input.x, input.u, &mut b[..d])?;

    // 1/2 tr(sigma sigma^T A) = 1/2 sum_{i,j} (sigma sigma^T)_{ij} A_{ij}
    let mut trace_term = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut ssct = 0.0;
            for l in 0..m {
                ssct += sig[i * m + l] * sig[j * m + l];
            }
            trace_term += ssct * input.a[i * d + j];
        }
    }
    let mut drift_term = 0.0;
    for i in 0..d {
        drift_term += b[i] * input.p[i];
    }
    // z = p sigma (row vector of length m)
    let mut z = [0.0; MAX_DIM];
    for l in 0..m {
        let mut acc = 0.0;
        for i in 0..d {
            acc += input.p[i] * sig[i * m + l];
        }
        z[l] = acc;
    }
    let f = prob.eval_driver(input.t, input.x, input.y, &z[..m], input.u)?;
    Ok(0.5 * trace_term + drift_term + f)
}

/// Minimum of the Hamiltonian over the control grid and the first index
/// attaining it.
pub fn hjb_driver_inf(
    prob: &ControlProblem,
    t: f64,
    x: &[f64],
    y: f64,
    p: &[f64],
    a: &[f64],
) -> Result<(f64, usize)> {
    let mut best = f64::INFINITY;
    let mut best_idx = 0usize;
    for (idx, u) in prob.controls.iter().enumerate() {
        let h = hamiltonian(prob, &HamiltonianInput { t, x, y, p, a, u })?;
        if h < best {
            best = h;
            best_idx = idx;
        }
    }
    Ok((best, best_idx))
}

// ---------------------------------------------------------------------------
// sampled assumption diagnostics

/// Sampled sup-norm / Lipschitz diagnostics for one coefficient.
#[derive(Debug, Clone, Serialize)]
pub struct CoefficientDiag {
    pub name: String,
    pub sup: f64,
    /// (t, x) part of the argmax sample.
    pub sup_at: Vec<f64>,
    pub lipschitz_est: f64,
    /// Sup over the full box grew markedly past the sup over the half box:
    /// unbounded growth suspected.
    pub growth_suspected: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub coefficients: Vec<CoefficientDiag>,
    /// Obstacle is constant over the sampled points (H7-style).
    pub obstacle_constant: Option<bool>,
    /// Sampled terminal-vs-obstacle ordering check; `None` when no obstacle.
    pub terminal_obstacle_ok: Option<bool>,
    /// Driver showed no sampled dependence on its z argument (H6-style).
    pub driver_z_free: bool,
    pub warnings: Vec<String>,
}

struct Sampler<'a> {
    d: usize,
    horizon: f64,
    box_lo: &'a [f64],
    box_hi: &'a [f64],
    seed: u64,
}

impl<'a> Sampler<'a> {
    fn point(&self, sample: u64, shrink: f64, t_buf: &mut f64, x: &mut [f64]) {
        *t_buf = self.horizon * rng::uniform(self.seed, sample, 0, 100);
        for i in 0..self.d {
            let mid = 0.5 * (self.box_lo[i] + self.box_hi[i]);
            let half = 0.5 * (self.box_hi[i] - self.box_lo[i]) * shrink;
            let r = rng::uniform(self.seed, sample, 1 + i as u64, 100);
            x[i] = mid + (2.0 * r - 1.0) * half;
        }
    }

    fn aux(&self, sample: u64, lane: u64) -> f64 {
        4.0 * rng::uniform(self.seed, sample, lane, 200) - 2.0
    }
}

/// Samples sup norms and difference-quotient Lipschitz estimates for every
/// coefficient over `[0,T] x box`, with y, z drawn from [-2, 2] and u from
/// the control grid. Violations are advisory; solving is never blocked.
pub fn check_assumptions(
    prob: &ControlProblem,
    samples: usize,
    box_lo: &[f64],
    box_hi: &[f64],
    seed: u64,
) -> Result<AssumptionReport> {
    if samples == 0 {
        return Err(Error::validation("samples", "need at least one sample"));
    }
    if box_lo.len() != prob.d || box_hi.len() != prob.d {
        return Err(Error::validation("box", "bounds must match the state dimension"));
    }
    let sampler = Sampler {
        d: prob.d,
        horizon: prob.horizon,
        box_lo,
        box_hi,
        seed,
    };

    let mut named: Vec<(String, &CoefficientExpr)> = Vec::new();
    for (i, e) in prob.drift.iter().enumerate() {
        named.push((format!("b[{i}]"), e));
    }
    for i in 0..prob.d {
        for j in 0..prob.m {
            named.push((format!("sigma[{i}][{j}]"), &prob.diffusion[i * prob.m + j]));
        }
    }
    named.push(("f".into(), &prob.driver));
    named.push(("Phi".into(), &prob.terminal));
    if let Some(phi) = &prob.obstacle {
        named.push(("phi".into(), phi));
    }

    let eval_at = |e: &CoefficientExpr, sample: u64, shrink: f64| -> Result<f64> {
        let mut t = 0.0;
        let mut x = [0.0; MAX_DIM];
        sampler.point(sample, shrink, &mut t, &mut x[..prob.d]);
        let y = sampler.aux(sample, 50);
        let z: Vec<f64> = (0..prob.m).map(|j| sampler.aux(sample, 60 + j as u64)).collect();
        let u = &prob.controls[sample as usize % prob.controls.len()];
        e.eval(&EvalEnv { t, x: &x[..prob.d], y, z: &z, u })
    };

    let mut coefficients = Vec::new();
    let mut warnings = Vec::new();
    for (name, e) in &named {
        let mut sup = 0.0f64;
        let mut sup_at_sample = 0u64;
        let mut sup_half = 0.0f64;
        let mut lip = 0.0f64;
        for s in 0..samples as u64 {
            if let Ok(v) = eval_at(e, s, 1.0) {
                if v.abs() > sup {
                    sup = v.abs();
                    sup_at_sample = s;
                }
                // Difference quotient against an independently drawn sample.
                let s2 = s ^ 0x8000_0000_0000_0000;
                if let Ok(w) = eval_at(e, s2, 1.0) {
                    let dist = sample_distance(&sampler, s, s2);
                    if dist > 1e-9 {
                        lip = lip.max((v - w).abs() / dist);
                    }
                }
            }
            if let Ok(v) = eval_at(e, s, 0.5) {
                sup_half = sup_half.max(v.abs());
            }
        }
        let growth_suspected = sup > 1.5 * sup_half && sup > 1e-9;
        if growth_suspected {
            warnings.push(format!(
                "{name}: sampled sup {sup:.6} grows with the box (unbounded growth suspected)"
            ));
        }
        let mut t_at = 0.0;
        let mut x_at = vec![0.0; prob.d];
        sampler.point(sup_at_sample, 1.0, &mut t_at, &mut x_at);
        let mut sup_at = vec![t_at];
        sup_at.extend_from_slice(&x_at);
        coefficients.push(CoefficientDiag {
            name: name.clone(),
            sup,
            sup_at,
            lipschitz_est: lip,
            growth_suspected,
        });
    }

    // Obstacle constancy (H7-style) and terminal ordering (H3/H3').
    let mut obstacle_constant = None;
    let mut terminal_obstacle_ok = None;
    if let Some(phi) = &prob.obstacle {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut ordering_ok = true;
        let mut t = 0.0;
        let mut x = vec![0.0; prob.d];
        for s in 0..samples as u64 {
            sampler.point(s, 1.0, &mut t, &mut x);
            if let Ok(v) = phi.eval(&EvalEnv::state(t, &x)) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let at_horizon = phi.eval(&EvalEnv::state(prob.horizon, &x));
            let term = prob.terminal.eval(&EvalEnv::state(0.0, &x));
            if let (Ok(pv), Ok(tv)) = (at_horizon, term) {
                let ok = match prob.obstacle_side {
                    ObstacleSide::Lower => tv >= pv - 1e-12,
                    ObstacleSide::Upper => tv <= pv + 1e-12,
                    ObstacleSide::None => true,
                };
                if !ok {
                    ordering_ok = false;
                }
            }
        }
        obstacle_constant = Some(hi - lo <= 1e-12);
        terminal_obstacle_ok = Some(ordering_ok);
        if !ordering_ok {
            warnings.push(format!(
                "terminal condition violates the {} obstacle ordering at sampled points",
                prob.obstacle_side
            ));
        }
    }

    // Sampled z-dependence of the driver (H6-style).
    let mut driver_z_free = true;
    {
        let mut t = 0.0;
        let mut x = vec![0.0; prob.d];
        for s in 0..samples.min(256) as u64 {
            sampler.point(s, 1.0, &mut t, &mut x);
            let y = sampler.aux(s, 50);
            let u = &prob.controls[s as usize % prob.controls.len()];
            let z1: Vec<f64> = (0..prob.m).map(|j| sampler.aux(s, 60 + j as u64)).collect();
            let z2: Vec<f64> = (0..prob.m).map(|j| sampler.aux(s, 70 + j as u64)).collect();
            let f1 = prob.driver.eval(&EvalEnv { t, x: &x, y, z: &z1, u });
            let f2 = prob.driver.eval(&EvalEnv { t, x: &x, y, z: &z2, u });
            if let (Ok(a), Ok(b)) = (f1, f2) {
                if (a - b).abs() > 1e-12 {
                    driver_z_free = false;
                    break;
                }
            }
        }
    }

    Ok(AssumptionReport {
        coefficients,
        obstacle_constant,
        terminal_obstacle_ok,
        driver_z_free,
        warnings,
    })
}

fn sample_distance(sampler: &Sampler, s1: u64, s2: u64) -> f64 {
    let d = sampler.d;
    let mut t1 = 0.0;
    let mut t2 = 0.0;
    let mut x1 = [0.0; MAX_DIM];
    let mut x2 = [0.0; MAX_DIM];
    sampler.point(s1, 1.0, &mut t1, &mut x1[..d]);
    sampler.point(s2, 1.0, &mut t2, &mut x2[..d]);
    let mut dist = (t1 - t2).abs();
    for i in 0..d {
        dist += (x1[i] - x2[i]).abs();
    }
    dist
}
