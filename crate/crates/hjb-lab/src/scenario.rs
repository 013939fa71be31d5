//! Scenario files: a line-oriented `key = value` format with bracketed
//! sections. The only nontrivial payload is the coefficient expressions,
//! which carry their own grammar.
//!
//! ```text
//! [problem]
//! d = 1
//! m = 1
//! T = 1.0
//! b = 0                  # entries '|'-separated for d > 1
//! sigma = 1              # rows ';', entries '|'
//! f = 0
//! Phi = abs(x1)
//! phi = none             # or an expression
//! side = none            # none | lower | upper
//! controls = 0           # points ';', components whitespace
//! [grid]
//! box = -4 4             # per-dim "lo hi", ';'-separated
//! nx = 801
//! nt = 20000
//! scheme = explicit      # explicit | implicit-sweep
//! variant = projected    # projected | penalized
//! penalty_n = 64
//! [mc]
//! n_paths = 100000
//! steps = 200
//! seed = 42
//! basis = cells 50       # "cells K" | "poly Q"
//! [penalty_ladder]
//! levels = 1 2 4 8 16 32 64 128 256
//! [regularity]
//! deltas = 0.25 0.0625
//! [constants]            # optional named constants for the expressions
//! [output]
//! dir = out
//! ```
//!
//! The scenario hash is an FNV-1a over the sorted canonicalized entries,
//! so it is stable under reordering and comment changes; the `[output]`
//! section is excluded from it.

use crate::bsde::{McSpec, PenaltyLadder, RegressionBasis};
use crate::error::{Error, Result};
use crate::expr::{parse_coefficient, VarSpace};
use crate::hjb::{fnv1a, Scheme, Variant};
use crate::problem::{ControlProblem, ObstacleSide};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub nx: Vec<usize>,
    pub nt: usize,
    pub scheme: Scheme,
    pub variant: Variant,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub problem: ControlProblem,
    pub var_space: VarSpace,
    pub grid: Option<GridSpec>,
    pub mc: McSpec,
    pub ladder: PenaltyLadder,
    pub deltas: Vec<f64>,
    pub output_dir: Option<PathBuf>,
    pub hash: u64,
}

struct RawScenario {
    /// (section, key) -> (value, line number)
    entries: BTreeMap<(String, String), (String, usize)>,
}

impl RawScenario {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = ln + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::Scenario { line: lineno, msg: "unterminated section header".into() });
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Scenario {
                    line: lineno,
                    msg: format!("expected 'key = value', got {line:?}"),
                });
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::Scenario { line: lineno, msg: "empty key".into() });
            }
            if entries.insert((section.clone(), key.clone()), (value, lineno)).is_some() {
                return Err(Error::Scenario {
                    line: lineno,
                    msg: format!("duplicate key {key:?} in section [{section}]"),
                });
            }
        }
        Ok(RawScenario { entries })
    }

    fn get(&self, section: &str, key: &str) -> Option<(&str, usize)> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(|(v, l)| (v.as_str(), *l))
    }

    fn require(&self, section: &str, key: &str) -> Result<(&str, usize)> {
        self.get(section, key).ok_or_else(|| Error::Scenario {
            line: 0,
            msg: format!("missing required key {key:?} in section [{section}]"),
        })
    }

    fn hash(&self) -> u64 {
        let mut canon = String::new();
        for ((section, key), (value, _)) in &self.entries {
            if section == "output" {
                continue;
            }
            canon.push_str(section);
            canon.push('\x1f');
            canon.push_str(key);
            canon.push('\x1f');
            canon.push_str(&value.split_whitespace().collect::<Vec<_>>().join(" "));
            canon.push('\x1e');
        }
        fnv1a(canon.as_bytes())
    }
}

fn scen_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Scenario { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize, what: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| scen_err(line, format!("cannot parse {what} from {v:?}")))
}

fn parse_f64_list(v: &str, line: usize, what: &str) -> Result<Vec<f64>> {
    v.split_whitespace()
        .map(|tok| parse_num::<f64>(tok, line, what))
        .collect()
}

/// Loads and validates a scenario file; every coefficient expression is
/// parsed eagerly.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let raw = RawScenario::parse(text)?;

    // Dimensions and control grid first: they fix the variable space.
    let (d_str, d_line) = raw.require("problem", "d")?;
    let d: usize = parse_num(d_str, d_line, "d")?;
    let (m_str, m_line) = raw.require("problem", "m")?;
    let m: usize = parse_num(m_str, m_line, "m")?;
    let (t_str, t_line) = raw.require("problem", "T")?;
    let horizon: f64 = parse_num(t_str, t_line, "T")?;

    let (controls_str, controls_line) = raw.require("problem", "controls")?;
    let mut controls = Vec::new();
    for point in controls_str.split(';') {
        let comps = parse_f64_list(point, controls_line, "control component")?;
        controls.push(comps);
    }
    if controls.is_empty() {
        return Err(scen_err(controls_line, "controls must list at least one point"));
    }
    let k = controls[0].len();

    let mut var_space = VarSpace::new(d, m, k);
    // Optional named constants.
    for ((section, key), (value, line)) in &raw.entries {
        if section == "constants" {
            let v: f64 = parse_num(value, *line, "constant")?;
            var_space.constants.push((key.clone(), v));
        }
    }
    var_space.constants.sort_by(|a, b| a.0.cmp(&b.0));

    let parse_expr = |text: &str, line: usize, field: &str| {
        parse_coefficient(text, &var_space).map_err(|e| {
            scen_err(line, format!("{field}: {e}"))
        })
    };

    let (b_str, b_line) = raw.require("problem", "b")?;
    let drift: Vec<_> = b_str
        .split('|')
        .map(|e| parse_expr(e.trim(), b_line, "b"))
        .collect::<Result<_>>()?;
    if drift.len() != d {
        return Err(scen_err(b_line, format!("b: expected {d} entries, got {}", drift.len())));
    }

    let (s_str, s_line) = raw.require("problem", "sigma")?;
    let mut diffusion = Vec::new();
    let rows: Vec<&str> = s_str.split(';').collect();
    if rows.len() != d {
        return Err(scen_err(s_line, format!("sigma: expected {d} rows, got {}", rows.len())));
    }
    for row in rows {
        let entries: Vec<&str> = row.split('|').collect();
        if entries.len() != m {
            return Err(scen_err(
                s_line,
                format!("sigma: expected {m} entries per row, got {}", entries.len()),
            ));
        }
        for e in entries {
            diffusion.push(parse_expr(e.trim(), s_line, "sigma")?);
        }
    }

    let (f_str, f_line) = raw.require("problem", "f")?;
    let driver = parse_expr(f_str, f_line, "f")?;
    let (phi_t_str, phi_t_line) = raw.require("problem", "Phi")?;
    let terminal = parse_expr(phi_t_str, phi_t_line, "Phi")?;

    let (side_str, side_line) = raw.require("problem", "side")?;
    let obstacle_side = match side_str {
        "none" => ObstacleSide::None,
        "lower" => ObstacleSide::Lower,
        "upper" => ObstacleSide::Upper,
        other => return Err(scen_err(side_line, format!("side: unknown value {other:?}"))),
    };
    let obstacle = match raw.get("problem", "phi") {
        None | Some(("none", _)) => None,
        Some((text, line)) => Some(parse_expr(text, line, "phi")?),
    };

    let problem = ControlProblem::new(
        d, m, horizon, drift, diffusion, driver, terminal, obstacle, obstacle_side, controls,
    )
    .map_err(|e| match e {
        Error::Validation { field, msg } => scen_err(0, format!("{field}: {msg}")),
        other => other,
    })?;

    // Grid section (optional).
    let grid = if raw.get("grid", "nx").is_some() {
        let (box_str, box_line) = raw.require("grid", "box")?;
        let mut box_lo = Vec::new();
        let mut box_hi = Vec::new();
        for dim in box_str.split(';') {
            let pair = parse_f64_list(dim, box_line, "box bound")?;
            if pair.len() != 2 {
                return Err(scen_err(box_line, "box: each dimension needs \"lo hi\""));
            }
            box_lo.push(pair[0]);
            box_hi.push(pair[1]);
        }
        if box_lo.len() != d {
            return Err(scen_err(box_line, format!("box: expected {d} dimensions")));
        }
        let (nx_str, nx_line) = raw.require("grid", "nx")?;
        let nx: Vec<usize> = nx_str
            .split_whitespace()
            .map(|tok| parse_num::<usize>(tok, nx_line, "nx"))
            .collect::<Result<_>>()?;
        let nx = if nx.len() == 1 && d > 1 { vec![nx[0]; d] } else { nx };
        if nx.len() != d {
            return Err(scen_err(nx_line, format!("nx: expected {d} entries")));
        }
        let (nt_str, nt_line) = raw.require("grid", "nt")?;
        let nt: usize = parse_num(nt_str, nt_line, "nt")?;
        let scheme = match raw.get("grid", "scheme") {
            None => Scheme::Explicit,
            Some(("explicit", _)) => Scheme::Explicit,
            Some(("implicit-sweep", _)) => Scheme::ImplicitSweep,
            Some((other, line)) => {
                return Err(scen_err(line, format!("scheme: unknown value {other:?}")))
            }
        };
        let variant = match raw.get("grid", "variant") {
            None => Variant::Projected,
            Some(("projected", _)) => Variant::Projected,
            Some(("penalized", line)) => {
                let (n_str, n_line) =
                    raw.get("grid", "penalty_n").ok_or_else(|| {
                        scen_err(line, "variant = penalized requires penalty_n")
                    })?;
                Variant::Penalized(parse_num(n_str, n_line, "penalty_n")?)
            }
            Some((other, line)) => {
                return Err(scen_err(line, format!("variant: unknown value {other:?}")))
            }
        };
        Some(GridSpec { box_lo, box_hi, nx, nt, scheme, variant })
    } else {
        None
    };

    // Monte Carlo section (defaults apply).
    let n_paths = match raw.get("mc", "n_paths") {
        Some((v, l)) => parse_num(v, l, "n_paths")?,
        None => 10_000,
    };
    let steps = match raw.get("mc", "steps") {
        Some((v, l)) => parse_num(v, l, "steps")?,
        None => 200,
    };
    let seed = match raw.get("mc", "seed") {
        Some((v, l)) => parse_num(v, l, "seed")?,
        None => 42,
    };
    let basis = match raw.get("mc", "basis") {
        None => RegressionBasis::default(),
        Some((text, line)) => {
            let toks: Vec<&str> = text.split_whitespace().collect();
            match toks.as_slice() {
                ["cells", n] => RegressionBasis::Cells { per_dim: parse_num(n, line, "basis")? },
                ["poly", q] => RegressionBasis::Polynomial { degree: parse_num(q, line, "basis")? },
                _ => return Err(scen_err(line, format!("basis: expected 'cells K' or 'poly Q', got {text:?}"))),
            }
        }
    };
    let mc = McSpec { n_paths, steps, seed, basis };

    let ladder = match raw.get("penalty_ladder", "levels") {
        None => PenaltyLadder::doubling(8),
        Some((text, line)) => {
            let levels: Vec<u64> = text
                .split_whitespace()
                .map(|tok| parse_num::<u64>(tok, line, "penalty level"))
                .collect::<Result<_>>()?;
            PenaltyLadder::new(levels).map_err(|e| scen_err(line, e.to_string()))?
        }
    };

    let deltas = match raw.get("regularity", "deltas") {
        None => vec![0.1, 0.25],
        Some((text, line)) => parse_f64_list(text, line, "delta")?,
    };

    let output_dir = raw.get("output", "dir").map(|(v, _)| PathBuf::from(v));

    Ok(Scenario {
        problem,
        var_space,
        grid,
        mc,
        ladder,
        deltas,
        output_dir,
        hash: raw.hash(),
    })
}

/// Run metadata written next to outputs on request. Timings are wall-clock
/// and intentionally excluded from the determinism contract.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub scenario_hash: String,
    pub tool_version: String,
    pub seed: u64,
    pub wall_ms: u128,
    pub stages: Vec<StageTiming>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: u128,
}

impl RunManifest {
    pub fn new(scenario_hash: u64, seed: u64) -> Self {
        RunManifest {
            scenario_hash: format!("{scenario_hash:016x}"),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            wall_ms: 0,
            stages: Vec::new(),
        }
    }
}
