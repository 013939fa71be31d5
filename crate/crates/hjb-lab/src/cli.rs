//! The `hjblab` command-line surface.
//!
//! Exit codes: 0 success, 1 usage error, 2 input error, 3 numerical
//! failure, 4 assertion failure in `--assert*` mode.

use crate::bsde::value_fixed_control;
use crate::error::Error;
use crate::fieldio::{field_distance_inner, load_field, save_field, write_field_csv};
use crate::forward::ControlPolicy;
use crate::hjb::{build_grid, solve_hjb, Scheme, ValueField, Variant};
use crate::problem::check_assumptions;
use crate::regularity::{oracle_value, regularity_report, OracleId};
use crate::scenario::{load_scenario, RunManifest, Scenario, StageTiming};
use crate::timechange::{coupled_invariance_check, lemma_bounds_check, make_time_change};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_ASSERT: i32 = 4;

const USAGE: &str = "\
hjblab - HJB obstacle-problem laboratory

USAGE:
  hjblab solve --scenario F.scn --out V.csv [--variant projected|penalized]
               [--penalty-n N] [--scheme explicit|implicit-sweep]
               [--manifest M.json]
  hjblab mc-value --scenario F.scn --t T0 --x \"x1[,x2..]\" --out TAB.csv
               [--policy const:IDX] [--paths N] [--steps K] [--seed S]
  hjblab regularity --field V.csv --out R.json [--deltas \"0.5,0.25\"]
               [--assert-diverging] [--assert-stable]
  hjblab timechange-check --scenario F.scn --t0 A --t1 B --out D.json
               [--n N] [--steps K] [--paths P] [--seed S] [--delta D]
               [--assert-max-dt-mult M]
  hjblab oracle --id NAME --T HORIZON (--t T --x X | --like V.csv --out O.csv)
  hjblab compare --a V.csv (--b W.csv | --oracle NAME) [--assert-sup TOL]
               [--inner-margin UNITS]
  hjblab check-assumptions --scenario F.scn [--samples N] [--seed S]
               [--box \"lo hi[;lo hi..]\"]

Environment: HJBLAB_THREADS caps worker threads (0 or unset = automatic).
";

struct Flags {
    pairs: Vec<(String, String)>,
    switches: Vec<String>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, String> {
        let mut pairs = Vec::new();
        let mut switches = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let Some(name) = arg.strip_prefix("--") else {
                return Err(format!("unexpected positional argument {arg:?}"));
            };
            if matches!(
                name,
                "assert-diverging" | "assert-stable"
            ) {
                switches.push(name.to_string());
                i += 1;
                continue;
            }
            let Some(value) = args.get(i + 1) else {
                return Err(format!("flag --{name} needs a value"));
            };
            pairs.push((name.to_string(), value.clone()));
            i += 2;
        }
        Ok(Flags { pairs, switches })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.pairs.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<&str, String> {
        self.get(name).ok_or_else(|| format!("missing required flag --{name}"))
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, String> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| format!("cannot parse --{name} value {v:?}")),
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Cfl(_) | Error::NonFinite(_) | Error::ExprEval(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

/// Runs the CLI against `argv` (without the program name), writing human
/// output to `out`. Returns the process exit code.
pub fn run_cli(argv: &[String], out: &mut dyn Write) -> i32 {
    match run_inner(argv, out) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(out, "error: {msg}");
            let _ = write!(out, "{USAGE}");
            EXIT_USAGE
        }
        Err(CliError::Lab(err)) => {
            let _ = writeln!(out, "error: {err}");
            exit_code_for(&err)
        }
        Err(CliError::Assert(msg)) => {
            let _ = writeln!(out, "assertion failed: {msg}");
            EXIT_ASSERT
        }
    }
}

enum CliError {
    Usage(String),
    Lab(Error),
    Assert(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lab(e)
    }
}

impl From<String> for CliError {
    fn from(msg: String) -> Self {
        CliError::Usage(msg)
    }
}

type CliResult = Result<i32, CliError>;

fn run_inner(argv: &[String], out: &mut dyn Write) -> CliResult {
    let Some(cmd) = argv.first() else {
        return Err(CliError::Usage("no subcommand given".into()));
    };
    let flags = Flags::parse(&argv[1..]).map_err(CliError::Usage)?;
    match cmd.as_str() {
        "solve" => cmd_solve(&flags, out),
        "mc-value" => cmd_mc_value(&flags, out),
        "regularity" => cmd_regularity(&flags, out),
        "timechange-check" => cmd_timechange(&flags, out),
        "oracle" => cmd_oracle(&flags, out),
        "compare" => cmd_compare(&flags, out),
        "check-assumptions" => cmd_assumptions(&flags, out),
        "help" | "--help" | "-h" => {
            let _ = write!(out, "{USAGE}");
            Ok(EXIT_OK)
        }
        other => Err(CliError::Usage(format!("unknown subcommand {other:?}"))),
    }
}

fn load(flags: &Flags) -> Result<Scenario, CliError> {
    let path = flags.require("scenario").map_err(CliError::Usage)?;
    Ok(load_scenario(Path::new(path))?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Lab(Error::Io(e)))?;
    Ok(())
}

/// Relative output paths land in the scenario's `[output] dir` when one is
/// declared (created on demand); absolute paths are used as given.
fn resolve_out(scenario: Option<&Scenario>, path: &str) -> Result<std::path::PathBuf, CliError> {
    let p = std::path::PathBuf::from(path);
    match scenario.and_then(|s| s.output_dir.as_ref()) {
        Some(dir) if p.is_relative() => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Lab(Error::Io(e)))?;
            Ok(dir.join(p))
        }
        _ => Ok(p),
    }
}

fn cmd_solve(flags: &Flags, out: &mut dyn Write) -> CliResult {
    let started = Instant::now();
    let scenario = load(flags)?;
    let out_path = flags.require("out").map_err(CliError::Usage)?;
    let Some(gspec) = &scenario.grid else {
        return Err(CliError::Lab(Error::validation("grid", "scenario has no [grid] section")));
    };
    let scheme = match flags.get("scheme") {
        None => gspec.scheme,
        Some("explicit") => Scheme::Explicit,
        Some("implicit-sweep") => Scheme::ImplicitSweep,
        Some(other) => return Err(CliError::Usage(format!("unknown scheme {other:?}"))),
    };
    let variant = match flags.get("variant") {
        None => gspec.variant,
        Some("projected") => Variant::Projected,
        Some("penalized") => {
            let n: f64 = flags
                .parse_num("penalty-n")
                .map_err(CliError::Usage)?
                .or(match gspec.variant {
                    Variant::Penalized(n) => Some(n),
                    Variant::Projected => None,
                })
                .ok_or_else(|| CliError::Usage("--variant penalized needs --penalty-n".into()))?;
            Variant::Penalized(n)
        }
        Some(other) => return Err(CliError::Usage(format!("unknown variant {other:?}"))),
    };
    let t_build = Instant::now();
    let grid = build_grid(
        &gspec.box_lo,
        &gspec.box_hi,
        &gspec.nx,
        gspec.nt,
        &scenario.problem,
        scheme,
    )?;
    for w in &grid.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    let t_solve = Instant::now();
    let field = solve_hjb(&scenario.problem, &grid, scenario.problem.obstacle_side, variant, scheme)?;
    let t_write = Instant::now();
    let out_file = resolve_out(Some(&scenario), out_path)?;
    save_field(&field, &out_file)?;
    let _ = writeln!(
        out,
        "solved {} nodes ({} x {}), wrote {}",
        field.values.len(),
        grid.nt + 1,
        grid.n_space(),
        out_file.display()
    );
    if let Some(manifest_path) = flags.get("manifest") {
        let mut manifest = RunManifest::new(scenario.hash, scenario.mc.seed);
        manifest.stages = vec![
            StageTiming { stage: "build_grid".into(), ms: t_solve.duration_since(t_build).as_millis() },
            StageTiming { stage: "solve".into(), ms: t_write.duration_since(t_solve).as_millis() },
            StageTiming { stage: "write".into(), ms: t_write.elapsed().as_millis() },
        ];
        manifest.wall_ms = started.elapsed().as_millis();
        let manifest_file = resolve_out(Some(&scenario), manifest_path)?;
        write_text(&manifest_file, &serde_json::to_string_pretty(&manifest).expect("manifest json"))?;
    }
    Ok(EXIT_OK)
}

fn parse_x(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|tok| tok.trim().parse::<f64>().map_err(|_| format!("bad coordinate {tok:?}")))
        .collect()
}

fn cmd_mc_value(flags: &Flags, out: &mut dyn Write) -> CliResult {
    let scenario = load(flags)?;
    let out_path = flags.require("out").map_err(CliError::Usage)?;
    let t: f64 = flags
        .parse_num("t")
        .map_err(CliError::Usage)?
        .ok_or_else(|| CliError::Usage("missing --t".into()))?;
    let x = parse_x(flags.require("x").map_err(CliError::Usage)?).map_err(CliError::Usage)?;
    let policy = match flags.get("policy") {
        None => ControlPolicy::Constant(0),
        Some(spec) => match spec.strip_prefix("const:") {
            Some(idx) => ControlPolicy::Constant(
                idx.parse().map_err(|_| CliError::Usage(format!("bad policy {spec:?}")))?,
            ),
            None => return Err(CliError::Usage(format!("unknown policy {spec:?}"))),
        },
    };
    let mut mc = scenario.mc.clone();
    if let Some(n) = flags.parse_num::<usize>("paths").map_err(CliError::Usage)? {
        mc.n_paths = n;
    }
    if let Some(s) = flags.parse_num::<usize>("steps").map_err(CliError::Usage)? {
        mc.steps = s;
    }
    if let Some(s) = flags.parse_num::<u64>("seed").map_err(CliError::Usage)? {
        mc.seed = s;
    }
    let table = value_fixed_control(&scenario.problem, t, &x, &policy, &scenario.ladder, &mc)?;
    let mut csv = String::from("kind,n,y0,ci95\n");
    for row in &table.rows {
        csv.push_str(&format!("level,{:.16e},{:.16e},{:.16e}\n", row.n, row.y0, row.ci95));
    }
    csv.push_str(&format!("limit,,{:.16e},{:.16e}\n", table.limit, table.limit_ci95));
    let out_file = resolve_out(Some(&scenario), out_path)?;
    write_text(&out_file, &csv)?;
    let _ = writeln!(
        out,
        "y0 = {:.10} (ci95 {:.2e}), wrote {}",
        table.limit,
        table.limit_ci95,
        out_file.display()
    );
    Ok(EXIT_OK)
}

fn cmd_regularity(flags: &Flags, out: &mut dyn Write) -> CliResult {
    let field_path = flags.require("field").map_err(CliError::Usage)?;
    let out_path = flags.require("out").map_err(CliError::Usage)?;
    let field = load_field(Path::new(field_path))?;
    let deltas: Vec<f64> = match flags.get("deltas") {
        Some(text) => parse_x(text).map_err(CliError::Usage)?,
        None => vec![0.1, 0.25],
    };
    let report = regularity_report(&field, &deltas)?;
    write_text(Path::new(out_path), &serde_json::to_string_pretty(&report).expect("report json"))?;
    for d in &report.deltas {
        let _ = writeln!(
            out,
            "delta {:.4}: lipschitz C={:.6} (time {:.6}), semiconcavity C={:.6}, holder C={:.6}, \
             stable(lip)={}, stable(semi)={}, diverging(semi)={}",
            d.delta,
            d.lipschitz.c,
            d.lipschitz.time_component,
            d.semiconcavity.c,
            d.holder.c,
            d.verdicts.lipschitz_stable,
            d.verdicts.semiconcave_stable,
            d.verdicts.semiconcave_diverging
        );
    }
    if flags.has("assert-diverging") && !report.deltas.iter().all(|d| d.verdicts.semiconcave_diverging)
    {
        return Err(CliError::Assert("expected semiconcave_diverging at every delta".into()));
    }
    if flags.has("assert-stable")
        && !report
            .deltas
            .iter()
            .all(|d| d.verdicts.semiconcave_stable && d.verdicts.lipschitz_stable)
    {
        return Err(CliError::Assert("expected stable constants at every delta".into()));
    }
    Ok(EXIT_OK)
}

fn cmd_timechange(flags: &Flags, out: &mut dyn Write) -> CliResult {
    let scenario = load(flags)?;
    let out_path = flags.require("out").map_err(CliError::Usage)?;
    let t0: f64 = flags
        .parse_num("t0")
        .map_err(CliError::Usage)?
        .ok_or_else(|| CliError::Usage("missing --t0".into()))?;
    let t1: f64 = flags
        .parse_num("t1")
        .map_err(CliError::Usage)?
        .ok_or_else(|| CliError::Usage("missing --t1".into()))?;
    let n: f64 = flags.parse_num("n").map_err(CliError::Usage)?.unwrap_or(64.0);
    let steps: usize = flags.parse_num("steps").map_err(CliError::Usage)?.unwrap_or(1500);
    let paths: usize = flags.parse_num("paths").map_err(CliError::Usage)?.unwrap_or(64);
    let seed: u64 = flags
        .parse_num("seed")
        .map_err(CliError::Usage)?
        .unwrap_or(scenario.mc.seed);
    let delta: f64 = flags.parse_num("delta").map_err(CliError::Usage)?.unwrap_or(0.1);
    let x0 = match flags.get("x") {
        Some(text) => parse_x(text).map_err(CliError::Usage)?,
        None => vec![0.0; scenario.problem.d],
    };
    let report = coupled_invariance_check(
        &scenario.problem,
        t0,
        t1,
        &x0,
        &ControlPolicy::Constant(0),
        n,
        steps,
        paths,
        seed,
        &scenario.mc.basis,
        delta,
    )?;
    // Deterministic-bound check for the same change.
    let tc = make_time_change(t0, t1, scenario.problem.horizon, delta)?;
    let bounds = lemma_bounds_check(&tc, delta)?;
    let doc = serde_json::json!({
        "discrepancy": report,
        "lemma_bounds": bounds,
    });
    let out_file = resolve_out(Some(&scenario), out_path)?;
    write_text(&out_file, &serde_json::to_string_pretty(&doc).expect("json"))?;
    let _ = writeln!(
        out,
        "max |Y~(t0) - Y(t1)| = {:.3e} over {paths} paths (dt {:.3e}); bounds pass = {}",
        report.max_abs, report.dt, bounds.pass
    );
    if let Some(mult) = flags.parse_num::<f64>("assert-max-dt-mult").map_err(CliError::Usage)? {
        if report.max_abs > mult * report.dt {
            return Err(CliError::Assert(format!(
                "max discrepancy {:.3e} exceeds {mult} x dt = {:.3e}",
                report.max_abs,
                mult * report.dt
            )));
        }
        if !bounds.pass {
            return Err(CliError::Assert("lemma bounds check failed".into()));
        }
    }
    Ok(EXIT_OK)
}

fn cmd_oracle(flags: &Flags, out: &mut dyn Write) -> CliResult {
    let name = flags.require("id").map_err(CliError::Usage)?;
    let horizon: f64 = flags.parse_num("T").map_err(CliError::Usage)?.unwrap_or(1.0);
    let id = OracleId::parse(name, horizon)?;
    if let Some(like) = flags.get("like") {
        let out_path = flags.require("out").map_err(CliError::Usage)?;
        let template = load_field(Path::new(like))?;
        if template.grid.d() != 1 {
            return Err(CliError::Lab(Error::validation("oracle", "grid sampling needs d = 1")));
        }
        let mut field = template.clone();
        if (field.grid.horizon - horizon).abs() > 1e-12 {
            return Err(CliError::Lab(Error::validation(
                "T",
                "oracle horizon differs from the field's",
            )));
        }
        let n_space = field.grid.n_space();
        for k in 0..=field.grid.nt {
            let t = field.grid.time_node(k);
            for j in 0..n_space {
                let x = field.grid.axes[0].node(j);
                field.values[k * n_space + j] = oracle_value(id, t, x)?;
                field.argmin[k * n_space + j] = 0;
            }
        }
        let mut buf = Vec::new();
        write_field_csv(&field, &mut buf)?;
        write_text(Path::new(out_path), &String::from_utf8(buf).expect("utf8 csv"))?;
        let _ = writeln!(out, "wrote oracle field {out_path}");
        return Ok(EXIT_OK);
    }
    let t: f64 = flags
        .parse_num("t")
        .map_err(CliError::Usage)?
        .ok_or_else(|| CliError::Usage("missing --t (or --like)".into()))?;
    let x: f64 = flags
        .parse_num("x")
        .map_err(CliError::Usage)?
        .ok_or_else(|| CliError::Usage("missing --x".into()))?;
    let v = oracle_value(id, t, x)?;
    let _ = writeln!(out, "{v:.10}");
    Ok(EXIT_OK)
}

fn load_field_checked(path: &str) -> Result<ValueField, CliError> {
    Ok(load_field(Path::new(path))?)
}

fn cmd_compare(flags: &Flags, out: &mut dyn Write) -> CliResult {
    let a = load_field_checked(flags.require("a").map_err(CliError::Usage)?)?;
    let b = match (flags.get("b"), flags.get("oracle")) {
        (Some(path), None) => load_field_checked(path)?,
        (None, Some(name)) => {
            if a.grid.d() != 1 {
                return Err(CliError::Lab(Error::validation("oracle", "oracle compare needs d = 1")));
            }
            let id = OracleId::parse(name, a.grid.horizon)?;
            let mut field = a.clone();
            let n_space = field.grid.n_space();
            for k in 0..=field.grid.nt {
                let t = field.grid.time_node(k);
                for j in 0..n_space {
                    let x = field.grid.axes[0].node(j);
                    field.values[k * n_space + j] = oracle_value(id, t, x)?;
                }
            }
            field
        }
        _ => return Err(CliError::Usage("compare needs exactly one of --b or --oracle".into())),
    };
    let margin: f64 = flags.parse_num("inner-margin").map_err(CliError::Usage)?.unwrap_or(0.0);
    let (sup, l2) = field_distance_inner(&a, &b, margin)?;
    let _ = writeln!(out, "sup = {sup:.10e}");
    let _ = writeln!(out, "l2 = {l2:.10e}");
    if let Some(tol) = flags.parse_num::<f64>("assert-sup").map_err(CliError::Usage)? {
        if sup > tol {
            return Err(CliError::Assert(format!("sup {sup:.6e} exceeds tolerance {tol:.6e}")));
        }
    }
    Ok(EXIT_OK)
}

fn cmd_assumptions(flags: &Flags, out: &mut dyn Write) -> CliResult {
    let scenario = load(flags)?;
    let samples: usize = flags.parse_num("samples").map_err(CliError::Usage)?.unwrap_or(2000);
    let seed: u64 = flags.parse_num("seed").map_err(CliError::Usage)?.unwrap_or(7);
    let (box_lo, box_hi) = match flags.get("box") {
        Some(text) => {
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            for dim in text.split(';') {
                let pair: Vec<f64> = dim
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| format!("bad box token {t:?}")))
                    .collect::<Result<_, String>>()
                    .map_err(CliError::Usage)?;
                if pair.len() != 2 {
                    return Err(CliError::Usage("box: each dimension needs \"lo hi\"".into()));
                }
                lo.push(pair[0]);
                hi.push(pair[1]);
            }
            (lo, hi)
        }
        None => match &scenario.grid {
            Some(g) => (g.box_lo.clone(), g.box_hi.clone()),
            None => (vec![-4.0; scenario.problem.d], vec![4.0; scenario.problem.d]),
        },
    };
    let report = check_assumptions(&scenario.problem, samples, &box_lo, &box_hi, seed)?;
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report json"));
    Ok(EXIT_OK)
}
