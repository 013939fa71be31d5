//! Value-field persistence.
//!
//! Fields are stored as CSV with `# key=value` metadata comments followed
//! by one row per node: `t_index,x_index_1..d,t,x1..xd,v,u_index`. Values
//! are written with 17 significant digits, so a write/read round trip is
//! bit-exact.

use crate::error::{Error, Result};
use crate::hjb::{AxisSpec, Scheme, SpaceTimeGrid, ValueField, Variant};
use crate::problem::{ObstacleSide, MAX_DIM};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub fn write_field_csv<W: Write>(field: &ValueField, w: &mut W) -> Result<()> {
    let grid = &field.grid;
    let d = grid.d();
    writeln!(w, "# hjblab-field v1")?;
    writeln!(w, "# d={d}")?;
    writeln!(w, "# T={:.16e}", grid.horizon)?;
    writeln!(w, "# nt={}", grid.nt)?;
    for (i, ax) in grid.axes.iter().enumerate() {
        writeln!(w, "# axis{i}={:.16e} {:.16e} {}", ax.lo, ax.hi, ax.nx)?;
    }
    writeln!(w, "# scheme={}", field.scheme)?;
    writeln!(w, "# variant={}", field.variant)?;
    writeln!(w, "# side={}", field.side)?;
    writeln!(w, "# problem_hash={:016x}", field.problem_hash)?;
    write!(w, "t_index")?;
    for i in 1..=d {
        write!(w, ",x_index_{i}")?;
    }
    write!(w, ",t")?;
    for i in 1..=d {
        write!(w, ",x{i}")?;
    }
    writeln!(w, ",v,u_index")?;

    let n_space = grid.n_space();
    let mut idx = [0usize; MAX_DIM];
    let mut x = [0.0f64; MAX_DIM];
    for k in 0..=grid.nt {
        for flat in 0..n_space {
            grid.unflatten(flat, &mut idx[..d]);
            grid.coords(&idx[..d], &mut x[..d]);
            write!(w, "{k}")?;
            for i in 0..d {
                write!(w, ",{}", idx[i])?;
            }
            write!(w, ",{:.16e}", grid.time_node(k))?;
            for i in 0..d {
                write!(w, ",{:.16e}", x[i])?;
            }
            writeln!(w, ",{:.16e},{}", field.value(k, flat), field.argmin[k * n_space + flat])?;
        }
    }
    Ok(())
}

pub fn save_field(field: &ValueField, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_field_csv(field, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn meta_err(key: &str) -> Error {
    Error::Csv { line: 0, msg: format!("missing metadata key {key:?}") }
}

pub fn read_field_csv<R: BufRead>(r: R) -> Result<ValueField> {
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    let mut header_seen = false;
    let mut d = 0usize;
    let mut grid: Option<SpaceTimeGrid> = None;
    let mut values: Vec<f64> = Vec::new();
    let mut argmin: Vec<u32> = Vec::new();
    let mut scheme = Scheme::Explicit;
    let mut variant = Variant::Projected;
    let mut side = ObstacleSide::None;
    let mut problem_hash = 0u64;

    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = ln + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(eq) = comment.find('=') {
                meta.insert(comment[..eq].trim().to_string(), comment[eq + 1..].trim().to_string());
            }
            continue;
        }
        if !header_seen {
            // The column header line; finalize metadata.
            header_seen = true;
            d = meta.get("d").ok_or_else(|| meta_err("d"))?.parse().map_err(|_| {
                Error::Csv { line: lineno, msg: "bad d".into() }
            })?;
            let horizon: f64 = meta
                .get("T")
                .ok_or_else(|| meta_err("T"))?
                .parse()
                .map_err(|_| Error::Csv { line: lineno, msg: "bad T".into() })?;
            let nt: usize = meta
                .get("nt")
                .ok_or_else(|| meta_err("nt"))?
                .parse()
                .map_err(|_| Error::Csv { line: lineno, msg: "bad nt".into() })?;
            let mut axes = Vec::new();
            for i in 0..d {
                let key = format!("axis{i}");
                let spec = meta.get(&key).ok_or_else(|| meta_err(&key))?;
                let toks: Vec<&str> = spec.split_whitespace().collect();
                if toks.len() != 3 {
                    return Err(Error::Csv { line: lineno, msg: format!("bad {key}") });
                }
                axes.push(AxisSpec {
                    lo: toks[0].parse().map_err(|_| Error::Csv { line: lineno, msg: format!("bad {key} lo") })?,
                    hi: toks[1].parse().map_err(|_| Error::Csv { line: lineno, msg: format!("bad {key} hi") })?,
                    nx: toks[2].parse().map_err(|_| Error::Csv { line: lineno, msg: format!("bad {key} nx") })?,
                });
            }
            scheme = match meta.get("scheme").ok_or_else(|| meta_err("scheme"))?.as_str() {
                "explicit" => Scheme::Explicit,
                "implicit-sweep" => Scheme::ImplicitSweep,
                other => return Err(Error::Csv { line: lineno, msg: format!("bad scheme {other:?}") }),
            };
            let variant_str = meta.get("variant").ok_or_else(|| meta_err("variant"))?;
            variant = if variant_str == "projected" {
                Variant::Projected
            } else if let Some(rest) = variant_str.strip_prefix("penalized(") {
                let n: f64 = rest
                    .strip_suffix(')')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Csv { line: lineno, msg: format!("bad variant {variant_str:?}") })?;
                Variant::Penalized(n)
            } else {
                return Err(Error::Csv { line: lineno, msg: format!("bad variant {variant_str:?}") });
            };
            side = match meta.get("side").ok_or_else(|| meta_err("side"))?.as_str() {
                "none" => ObstacleSide::None,
                "lower" => ObstacleSide::Lower,
                "upper" => ObstacleSide::Upper,
                other => return Err(Error::Csv { line: lineno, msg: format!("bad side {other:?}") }),
            };
            problem_hash = u64::from_str_radix(
                meta.get("problem_hash").ok_or_else(|| meta_err("problem_hash"))?,
                16,
            )
            .map_err(|_| Error::Csv { line: lineno, msg: "bad problem_hash".into() })?;
            let g = SpaceTimeGrid {
                horizon,
                nt,
                axes,
                explicit_dt_bound: f64::INFINITY,
                warnings: Vec::new(),
            };
            let total = (nt + 1) * g.n_space();
            values = vec![f64::NAN; total];
            argmin = vec![0; total];
            grid = Some(g);
            continue;
        }
        let g = grid.as_ref().expect("grid set at header");
        let cols: Vec<&str> = trimmed.split(',').collect();
        if cols.len() != 2 * d + 4 {
            return Err(Error::Csv {
                line: lineno,
                msg: format!("expected {} columns, got {}", 2 * d + 4, cols.len()),
            });
        }
        let k: usize = cols[0]
            .parse()
            .map_err(|_| Error::Csv { line: lineno, msg: "bad t_index".into() })?;
        let mut idx = [0usize; MAX_DIM];
        for i in 0..d {
            idx[i] = cols[1 + i]
                .parse()
                .map_err(|_| Error::Csv { line: lineno, msg: format!("bad x_index_{}", i + 1) })?;
            if idx[i] >= g.axes[i].nx {
                return Err(Error::Csv { line: lineno, msg: format!("x_index_{} out of range", i + 1) });
            }
        }
        if k > g.nt {
            return Err(Error::Csv { line: lineno, msg: "t_index out of range".into() });
        }
        let v: f64 = cols[2 + 2 * d]
            .parse()
            .map_err(|_| Error::Csv { line: lineno, msg: "bad value".into() })?;
        let u: u32 = cols[3 + 2 * d]
            .parse()
            .map_err(|_| Error::Csv { line: lineno, msg: "bad u_index".into() })?;
        let flat = g.flatten(&idx[..d]);
        let slot = k * g.n_space() + flat;
        values[slot] = v;
        argmin[slot] = u;
    }

    let grid = grid.ok_or_else(|| Error::Csv { line: 0, msg: "no header row found".into() })?;
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Csv { line: 0, msg: "missing node rows".into() });
    }
    Ok(ValueField { grid, values, argmin, scheme, variant, side, problem_hash })
}

pub fn load_field(path: &Path) -> Result<ValueField> {
    let file = std::fs::File::open(path)?;
    read_field_csv(std::io::BufReader::new(file))
}

/// Sup and L2 (node-RMS) distance between two fields on identical grids.
pub fn field_distance(a: &ValueField, b: &ValueField) -> Result<(f64, f64)> {
    field_distance_inner(a, b, 0.0)
}

/// As [`field_distance`], ignoring nodes closer than `margin` (in state
/// units) to any spatial wall. Useful for whole-space problems truncated
/// to a box, where the wall closure carries a first-order layer.
pub fn field_distance_inner(a: &ValueField, b: &ValueField, margin: f64) -> Result<(f64, f64)> {
    if a.grid.nt != b.grid.nt
        || a.grid.d() != b.grid.d()
        || (a.grid.horizon - b.grid.horizon).abs() > 1e-12
        || a.grid
            .axes
            .iter()
            .zip(&b.grid.axes)
            .any(|(x, y)| x.nx != y.nx || (x.lo - y.lo).abs() > 1e-12 || (x.hi - y.hi).abs() > 1e-12)
    {
        return Err(Error::validation("fields", "grids do not match"));
    }
    let grid = &a.grid;
    let d = grid.d();
    let n_space = grid.n_space();
    let mut inside = vec![true; n_space];
    if margin > 0.0 {
        let mut idx = [0usize; MAX_DIM];
        let mut x = [0.0f64; MAX_DIM];
        for (flat, flag) in inside.iter_mut().enumerate() {
            grid.unflatten(flat, &mut idx[..d]);
            grid.coords(&idx[..d], &mut x[..d]);
            for i in 0..d {
                if x[i] < grid.axes[i].lo + margin || x[i] > grid.axes[i].hi - margin {
                    *flag = false;
                    break;
                }
            }
        }
    }
    let mut sup = 0.0f64;
    let mut ss = 0.0f64;
    let mut count = 0usize;
    for k in 0..=grid.nt {
        for flat in 0..n_space {
            if !inside[flat] {
                continue;
            }
            let diff = (a.value(k, flat) - b.value(k, flat)).abs();
            sup = sup.max(diff);
            ss += diff * diff;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::validation("margin", "no nodes remain inside the margin"));
    }
    Ok((sup, (ss / count as f64).sqrt()))
}
