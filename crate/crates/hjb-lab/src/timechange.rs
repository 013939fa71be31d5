//! The linear time change as an executable problem transform.
//!
//! `tau: [t1, T] -> [t0, T]`, `tau(s) = t0 + rate (s - t1)` with
//! `rate = (T - t0)/(T - t1)`, rescales Brownian motion by `1/sqrt(rate)`.
//! Rewriting the coefficients accordingly,
//!
//! ```text
//! b~(s,x,u)       = b(tau^-1(s), x, u) / rate
//! sigma~(s,x,u)   = sigma(tau^-1(s), x, u) / sqrt(rate)
//! f~(s,x,y,z,u)   = f(tau^-1(s), x, y, sqrt(rate) z, u) / rate
//! phi~(s,x)       = phi(tau^-1(s), x)          penalty weight n / rate
//! ```
//!
//! gives a system on `[t0, T]` whose solution at `t0` equals the original
//! solution at `t1`. The coupled check below drives both systems from one
//! increment stream with matched step indices (`dW0_k = sqrt(rate) dW1_k`),
//! under which the two discrete recursions coincide term by term, so the
//! reported discrepancy measures pure floating-point drift of the
//! reparameterization rather than statistical error.

use crate::bsde::{solve_bsde, solve_penalized, RegressionBasis};
use crate::error::{Error, Result};
use crate::expr::CoefficientExpr;
use crate::forward::{simulate_paths, ControlPolicy, TimeGrid};
use crate::problem::{ControlProblem, ObstacleSide};
use serde::Serialize;

/// Linear reparameterization of `[t1, T]` onto `[t0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeChange {
    pub t0: f64,
    pub t1: f64,
    pub horizon: f64,
    /// `d tau / ds = (T - t0)/(T - t1)`.
    pub rate: f64,
}

impl TimeChange {
    /// Forward map `tau(s) = t0 + rate (s - t1)`, `[t1,T] -> [t0,T]`.
    /// Endpoint images are exact.
    pub fn map(&self, s: f64) -> f64 {
        if s == self.t1 {
            self.t0
        } else if s == self.horizon {
            self.horizon
        } else {
            self.t0 + self.rate * (s - self.t1)
        }
    }

    /// Inverse map `tau^-1(s) = t1 + (s - t0)/rate`, `[t0,T] -> [t1,T]`.
    pub fn inverse(&self, s: f64) -> f64 {
        if s == self.t0 {
            self.t1
        } else if s == self.horizon {
            self.horizon
        } else {
            self.t1 + (s - self.t0) / self.rate
        }
    }
}

/// Validates `t0, t1 in [0, T - delta]` and builds the change.
pub fn make_time_change(t0: f64, t1: f64, horizon: f64, delta: f64) -> Result<TimeChange> {
    if !(delta > 0.0) {
        return Err(Error::validation("delta", "must be positive"));
    }
    for (name, v) in [("t0", t0), ("t1", t1)] {
        if !(0.0..=horizon - delta + 1e-12).contains(&v) {
            return Err(Error::validation(
                name,
                format!("{v} outside [0, T - delta] = [0, {}]", horizon - delta),
            ));
        }
    }
    Ok(TimeChange { t0, t1, horizon, rate: (horizon - t0) / (horizon - t1) })
}

/// Deterministic-bound report: the scan of
/// `|tau^-1(s) - s| + |1/rate - 1| + |1/sqrt(rate) - 1|` over `[t0, T]`
/// against the explicit sufficient constant `(T + 2)/delta`.
#[derive(Debug, Clone, Serialize)]
pub struct LemmaBoundsReport {
    pub t0: f64,
    pub t1: f64,
    pub max_lhs: f64,
    /// `max_lhs / |t0 - t1|`; zero by convention when t0 == t1.
    pub empirical_c: f64,
    /// The explicit sufficient constant `T/delta + 2/delta`.
    pub bound_c: f64,
    pub pass: bool,
}

pub fn lemma_bounds_check(tc: &TimeChange, delta: f64) -> Result<LemmaBoundsReport> {
    if !(delta > 0.0) {
        return Err(Error::validation("delta", "must be positive"));
    }
    let gap = (tc.t0 - tc.t1).abs();
    let bound_c = tc.horizon / delta + 2.0 / delta;
    if gap == 0.0 {
        return Ok(LemmaBoundsReport {
            t0: tc.t0,
            t1: tc.t1,
            max_lhs: 0.0,
            empirical_c: 0.0,
            bound_c,
            pass: true,
        });
    }
    let scan = 2000usize;
    let mut max_lhs = 0.0f64;
    let rate_terms = (1.0 / tc.rate - 1.0).abs() + (1.0 / tc.rate.sqrt() - 1.0).abs();
    for i in 0..=scan {
        let s = tc.t0 + (tc.horizon - tc.t0) * (i as f64 / scan as f64);
        let lhs = (tc.inverse(s) - s).abs() + rate_terms;
        max_lhs = max_lhs.max(lhs);
    }
    let empirical_c = max_lhs / gap;
    Ok(LemmaBoundsReport {
        t0: tc.t0,
        t1: tc.t1,
        max_lhs,
        empirical_c,
        bound_c,
        pass: max_lhs <= bound_c * gap + 1e-12,
    })
}

/// A control problem rewritten through a time change, with the adjusted
/// penalty weight and the shifted initial time.
#[derive(Debug, Clone)]
pub struct TransformedProblem {
    pub problem: ControlProblem,
    pub change: TimeChange,
    /// `n / rate` for a caller-supplied penalty level `n`.
    pub penalty_weight: f64,
    /// The transformed system starts here (the image of t1).
    pub t_start: f64,
}

/// Rewrites the coefficients of `prob` through `tc`. An identity change
/// (t0 == t1) returns the coefficients unchanged.
pub fn transform_problem(prob: &ControlProblem, tc: &TimeChange, n: f64) -> Result<TransformedProblem> {
    if (prob.horizon - tc.horizon).abs() > 1e-12 {
        return Err(Error::validation("T", "time change horizon differs from the problem's"));
    }
    if tc.t0 == tc.t1 {
        return Ok(TransformedProblem {
            problem: prob.clone(),
            change: *tc,
            penalty_weight: n,
            t_start: tc.t0,
        });
    }
    let rate = tc.rate;
    let sqrt_rate = rate.sqrt();
    // tau^-1(t) = t1 + (t - t0)/rate, spliced into every coefficient.
    let inv_map = CoefficientExpr::affine_time_map(tc.t1, tc.t0, rate);
    let drift = prob
        .drift
        .iter()
        .map(|e| e.reparameterized(Some(&inv_map), 1.0, rate))
        .collect();
    let diffusion = prob
        .diffusion
        .iter()
        .map(|e| e.reparameterized(Some(&inv_map), 1.0, sqrt_rate))
        .collect();
    let driver = prob.driver.reparameterized(Some(&inv_map), sqrt_rate, rate);
    let obstacle = prob
        .obstacle
        .as_ref()
        .map(|e| e.reparameterized(Some(&inv_map), 1.0, 1.0));
    let problem = ControlProblem::new(
        prob.d,
        prob.m,
        prob.horizon,
        drift,
        diffusion,
        driver,
        prob.terminal.clone(),
        obstacle,
        prob.obstacle_side,
        prob.controls.clone(),
    )?;
    Ok(TransformedProblem {
        problem,
        change: *tc,
        penalty_weight: n / rate,
        t_start: tc.t0,
    })
}

/// Per-path discrepancy between the original system started at `(t1, x)`
/// and the transformed system started at `(t0, x)` under the coupled
/// increment streams.
#[derive(Debug, Clone, Serialize)]
pub struct DiscrepancyReport {
    pub t0: f64,
    pub t1: f64,
    pub n: f64,
    /// Time step of the original (t1-side) run.
    pub dt: f64,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub per_path_quantiles: Quantiles,
}

#[derive(Debug, Clone, Serialize)]
pub struct Quantiles {
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
}

/// Runs (A) the original penalized system from `(t1, x)` driven by the
/// counter stream and (B) the transformed system from `(t0, x)` driven by
/// the same stream scaled by `sqrt(rate)`, matched step for step, and
/// reports `|Y~_{t0} - Y_{t1}|` per path.
#[allow(clippy::too_many_arguments)]
pub fn coupled_invariance_check(
    prob: &ControlProblem,
    t0: f64,
    t1: f64,
    x: &[f64],
    policy: &ControlPolicy,
    n: f64,
    steps: usize,
    n_paths: usize,
    seed: u64,
    basis: &RegressionBasis,
    delta: f64,
) -> Result<DiscrepancyReport> {
    let tc = make_time_change(t0, t1, prob.horizon, delta)?;
    let transformed = transform_problem(prob, &tc, n)?;

    let grid_a = TimeGrid::new(t1, prob.horizon, steps)?;
    let bundle_a = simulate_paths(prob, policy, t1, x, &grid_a, n_paths, seed)?;
    let sol_a = match prob.obstacle_side {
        ObstacleSide::None => solve_bsde(&bundle_a, prob, basis)?,
        side => solve_penalized(&bundle_a, prob, n, side, basis)?,
    };

    // Same seed, same step count: the two increment streams are the same
    // standard normals scaled by each grid's own sqrt(dt), which realizes
    // dW0_k = sqrt(rate) dW1_k exactly.
    let grid_b = TimeGrid::new(t0, prob.horizon, steps)?;
    let bundle_b = simulate_paths(&transformed.problem, policy, t0, x, &grid_b, n_paths, seed)?;
    let sol_b = match prob.obstacle_side {
        ObstacleSide::None => solve_bsde(&bundle_b, &transformed.problem, basis)?,
        side => solve_penalized(
            &bundle_b,
            &transformed.problem,
            transformed.penalty_weight,
            side,
            basis,
        )?,
    };

    let mut diffs: Vec<f64> = (0..n_paths)
        .map(|p| (sol_b.y_at(p, 0) - sol_a.y_at(p, 0)).abs())
        .collect();
    let mean_abs = crate::par::ordered_sum(&diffs) / n_paths as f64;
    diffs.sort_by(f64::total_cmp);
    let quantile = |q: f64| diffs[((q * (n_paths - 1) as f64).round() as usize).min(n_paths - 1)];
    Ok(DiscrepancyReport {
        t0,
        t1,
        n,
        dt: grid_a.dt(),
        max_abs: *diffs.last().expect("nonempty"),
        mean_abs,
        per_path_quantiles: Quantiles { q50: quantile(0.5), q90: quantile(0.9), q99: quantile(0.99) },
    })
}
