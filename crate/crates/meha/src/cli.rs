//! Command-line plumbing: config parsing, run orchestration, parameter
//! sweeps, the self-check battery, and trace/manifest serialization.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{StepMode, StopRule};
use crate::diagnostics::{
    feasibility_gap, rate_fit, stationarity_residual, DiagnosticsReport, RateField, TraceRecord,
};
use crate::error::{MehaError, Result};
use crate::moreau::{contraction_factor, theta_step, InnerOracle};
use crate::problems::{
    generate_group_lasso_data, make_group_lasso, make_lasso_toy, make_merely_convex,
    make_sin_nonconvex_uniform, make_strong_convex_toy, squared_error_sum, ProblemBundle,
};
use crate::prox::{group_soft_threshold, oracle_grid_spacing, prox_bruteforce_oracle,
    soft_threshold};
use crate::solver::{run_with_plan, RunResult, StopReason, TracePlan};

const CONFIG_KEYS: &[&str] = &[
    "problem", "dim", "gamma", "c_lower", "p", "alpha0", "beta0", "eta0", "step_mode", "q",
    "max_iters", "tol", "stop_rule", "seed",
];

/// Keys whose values may carry lists in a sweep configuration.
const SWEEP_KEYS: &[&str] = &[
    "dim", "gamma", "c_lower", "p", "alpha0", "beta0", "eta0", "q", "max_iters", "tol", "seed",
];

/// A parsed configuration: the problem bundle with overrides applied, plus
/// the raw document for echoing into manifests.
pub struct ParsedConfig {
    pub bundle: ProblemBundle,
    pub raw: Map<String, Value>,
}

fn config_error(path: &Path, message: impl Into<String>) -> MehaError {
    MehaError::ConfigFile {
        path: path.into(),
        message: message.into(),
    }
}

fn get_f64(map: &Map<String, Value>, key: &str, path: &Path) -> Result<Option<f64>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| config_error(path, format!("key {key:?} must be a number, got {v}"))),
    }
}

fn get_usize(map: &Map<String, Value>, key: &str, path: &Path) -> Result<Option<usize>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.as_u64().map(|u| Some(u as usize)).ok_or_else(|| {
            config_error(path, format!("key {key:?} must be a nonnegative integer, got {v}"))
        }),
    }
}

fn get_str<'a>(map: &'a Map<String, Value>, key: &str, path: &Path) -> Result<Option<&'a str>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_str()
            .map(Some)
            .ok_or_else(|| config_error(path, format!("key {key:?} must be a string, got {v}"))),
    }
}

/// Parse a flat key-value configuration document into a ready-to-run bundle.
///
/// Unknown keys are rejected; missing keys fall back to the selected
/// problem's defaults.
pub fn parse_config(path: &Path) -> Result<ParsedConfig> {
    let text = fs::read_to_string(path).map_err(|e| MehaError::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| config_error(path, format!("invalid JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(config_error(path, "configuration must be a JSON object"));
    };
    parse_config_map(map, path)
}

/// [`parse_config`] for an already-deserialized document (used by sweeps).
pub fn parse_config_map(map: Map<String, Value>, path: &Path) -> Result<ParsedConfig> {
    for key in map.keys() {
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(config_error(path, format!("unknown key {key:?}")));
        }
    }

    let problem = get_str(&map, "problem", path)?
        .ok_or_else(|| config_error(path, "missing required key \"problem\""))?
        .to_string();
    let dim = get_usize(&map, "dim", path)?;
    let seed = get_usize(&map, "seed", path)?.map(|s| s as u64).unwrap_or(0);

    let mut bundle = match problem.as_str() {
        "strong_convex_toy" => make_strong_convex_toy(dim.unwrap_or(100))?,
        "merely_convex" => make_merely_convex(dim.unwrap_or(100))?,
        "sin_nonconvex" => make_sin_nonconvex_uniform(dim.unwrap_or(1), 2.0, 2.0)?,
        "lasso_toy" => make_lasso_toy(dim.unwrap_or(100))?,
        "group_lasso" => {
            let m = dim.unwrap_or(600);
            let groups = if m == 600 { 30 } else { 300 };
            let data = generate_group_lasso_data(100, m, seed)?;
            make_group_lasso(data, groups)?
        }
        other => {
            return Err(config_error(
                path,
                format!(
                    "unknown problem {other:?}; expected one of strong_convex_toy, \
                     merely_convex, sin_nonconvex, lasso_toy, group_lasso"
                ),
            ))
        }
    };

    let cfg = &mut bundle.default_config;
    cfg.seed = seed;
    if let Some(v) = get_f64(&map, "gamma", path)? {
        cfg.gamma = v;
    }
    if let Some(v) = get_f64(&map, "c_lower", path)? {
        cfg.c_lower = v;
    }
    if let Some(v) = get_f64(&map, "p", path)? {
        cfg.p = v;
    }
    if let Some(v) = get_f64(&map, "alpha0", path)? {
        cfg.alpha0 = v;
    }
    if let Some(v) = get_f64(&map, "beta0", path)? {
        cfg.beta0 = v;
    }
    if let Some(v) = get_f64(&map, "eta0", path)? {
        cfg.eta0 = v;
    }
    if let Some(v) = get_usize(&map, "max_iters", path)? {
        cfg.max_iters = v;
    }
    match get_str(&map, "step_mode", path)? {
        None => {
            if let Some(q) = get_f64(&map, "q", path)? {
                cfg.step_mode = StepMode::InversePower { q };
            }
        }
        Some("fixed") => cfg.step_mode = StepMode::Fixed,
        Some("inverse_power") => {
            let q = get_f64(&map, "q", path)?.unwrap_or(0.5);
            cfg.step_mode = StepMode::InversePower { q };
        }
        Some(other) => {
            return Err(config_error(
                path,
                format!("step_mode must be \"fixed\" or \"inverse_power\", got {other:?}"),
            ))
        }
    }
    let tol = get_f64(&map, "tol", path)?;
    match get_str(&map, "stop_rule", path)? {
        None => {
            if let Some(t) = tol {
                // Re-tolerance the problem's default rule.
                cfg.stop_rule = match cfg.stop_rule {
                    StopRule::MaxItersOnly => StopRule::MaxItersOnly,
                    StopRule::DirectionNorm { .. } => StopRule::DirectionNorm { tol: t },
                    StopRule::RelErrorToSolution { .. } => {
                        StopRule::RelErrorToSolution { tol: t }
                    }
                    StopRule::RelChangeX { .. } => StopRule::RelChangeX { tol: t },
                };
            }
        }
        Some(kind) => {
            let need_tol = || {
                tol.ok_or_else(|| {
                    config_error(path, format!("stop_rule {kind:?} needs a \"tol\" value"))
                })
            };
            cfg.stop_rule = match kind {
                "max_iters_only" => StopRule::MaxItersOnly,
                "direction_norm" => StopRule::DirectionNorm { tol: need_tol()? },
                "rel_error_to_solution" => StopRule::RelErrorToSolution { tol: need_tol()? },
                "rel_change_x" => StopRule::RelChangeX { tol: need_tol()? },
                other => {
                    return Err(config_error(
                        path,
                        format!("unknown stop_rule {other:?}"),
                    ))
                }
            };
        }
    }
    cfg.validate().map_err(|e| config_error(path, e.to_string()))?;

    Ok(ParsedConfig { bundle, raw: map })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const TRACE_HEADER: &str =
    "k,c_k,alpha_k,beta_k,F_val,gap,residual,merit,err_x_rel,err_y_rel,theta_inner_residual,elapsed_s";

/// Serialize a trace to CSV with a fixed 12-column schema; floats carry 17
/// significant digits so values round-trip bitwise.
pub fn write_trace_csv(trace: &[TraceRecord], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.k,
            fmt_f64(r.c_k),
            fmt_f64(r.alpha_k),
            fmt_f64(r.beta_k),
            fmt_f64(r.f_val),
            fmt_opt(r.gap),
            fmt_opt(r.residual_surrogate),
            fmt_opt(r.merit),
            fmt_opt(r.err_x_rel),
            fmt_opt(r.err_y_rel),
            fmt_f64(r.theta_inner_residual),
            fmt_f64(r.elapsed_s),
        ));
    }
    fs::write(path, out).map_err(|e| MehaError::io(path, e))
}

/// Parse a trace CSV produced by [`write_trace_csv`].
pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| MehaError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| MehaError::CsvParse {
        path: path.into(),
        row: 0,
        message: "empty trace file".into(),
    })?;
    if header != TRACE_HEADER {
        return Err(MehaError::CsvParse {
            path: path.into(),
            row: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let row = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 12 {
            return Err(MehaError::CsvParse {
                path: path.into(),
                row,
                message: format!("expected 12 columns, found {}", cells.len()),
            });
        }
        let req = |i: usize| -> Result<f64> {
            cells[i].parse::<f64>().map_err(|_| MehaError::CsvParse {
                path: path.into(),
                row,
                message: format!("column {}: cannot parse {:?}", i + 1, cells[i]),
            })
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if cells[i].is_empty() {
                Ok(None)
            } else {
                req(i).map(Some)
            }
        };
        records.push(TraceRecord {
            k: cells[0].parse().map_err(|_| MehaError::CsvParse {
                path: path.into(),
                row,
                message: format!("column 1: cannot parse {:?}", cells[0]),
            })?,
            c_k: req(1)?,
            alpha_k: req(2)?,
            beta_k: req(3)?,
            f_val: req(4)?,
            gap: opt(5)?,
            residual_surrogate: opt(6)?,
            merit: opt(7)?,
            err_x_rel: opt(8)?,
            err_y_rel: opt(9)?,
            theta_inner_residual: req(10)?,
            elapsed_s: req(11)?,
        });
    }
    Ok(records)
}

/// Effective flat configuration of a bundle, reusable as a config document.
pub fn effective_config_map(bundle: &ProblemBundle) -> Map<String, Value> {
    let cfg = &bundle.default_config;
    let mut map = Map::new();
    map.insert("problem".into(), json!(bundle.name));
    if let Some(dim) = bundle.params.get("dim") {
        map.insert("dim".into(), dim.clone());
    }
    map.insert("gamma".into(), json!(cfg.gamma));
    map.insert("c_lower".into(), json!(cfg.c_lower));
    map.insert("p".into(), json!(cfg.p));
    map.insert("alpha0".into(), json!(cfg.alpha0));
    map.insert("beta0".into(), json!(cfg.beta0));
    map.insert("eta0".into(), json!(cfg.eta0));
    match cfg.step_mode {
        StepMode::Fixed => {
            map.insert("step_mode".into(), json!("fixed"));
        }
        StepMode::InversePower { q } => {
            map.insert("step_mode".into(), json!("inverse_power"));
            map.insert("q".into(), json!(q));
        }
    }
    map.insert("max_iters".into(), json!(cfg.max_iters));
    map.insert("stop_rule".into(), json!(cfg.stop_rule.kind_name()));
    if let Some(tol) = cfg.stop_rule.tol() {
        map.insert("tol".into(), json!(tol));
    }
    map.insert("seed".into(), json!(cfg.seed));
    map
}

/// Self-contained summary of one run; the embedded `config` object is a
/// valid configuration document that reproduces the run.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub problem: String,
    pub params: Map<String, Value>,
    pub config: Map<String, Value>,
    pub seed: u64,
    pub version: String,
    pub start_unix_s: u64,
    pub stop_reason: String,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub failure: Option<String>,
    /// Final-iterate metrics: F_val, and when available err_x_rel,
    /// err_y_rel, gap, residual, test_error.
    pub final_metrics: Map<String, Value>,
}

impl RunManifest {
    pub fn to_value(&self) -> Value {
        json!({
            "problem": self.problem,
            "params": Value::Object(self.params.clone()),
            "config": Value::Object(self.config.clone()),
            "seed": self.seed,
            "version": self.version,
            "start_unix_s": self.start_unix_s,
            "stop_reason": self.stop_reason,
            "iterations": self.iterations,
            "wall_time_s": self.wall_time_s,
            "failure": self.failure,
            "final": Value::Object(self.final_metrics.clone()),
        })
    }
}

pub fn build_manifest(
    bundle: &ProblemBundle,
    result: &RunResult,
    start_unix_s: u64,
) -> Result<RunManifest> {
    let state = &result.final_state;
    let cfg = &bundle.default_config;
    let oracle = InnerOracle::new(cfg.eta0, cfg.gamma, cfg.inner_oracle_tol, 50_000);
    let last = result.trace.last();

    let mut final_metrics = Map::new();
    final_metrics.insert(
        "F_val".into(),
        json!(bundle.spec.eval_upper(&state.x, &state.y)),
    );
    if let Some(r) = last {
        if let Some(e) = r.err_x_rel {
            final_metrics.insert("err_x_rel".into(), json!(e));
        }
        if let Some(e) = r.err_y_rel {
            final_metrics.insert("err_y_rel".into(), json!(e));
        }
    }
    if result.stop_reason != StopReason::NumericalFailure {
        if let Ok(report) = feasibility_gap(&bundle.spec, &state.x, &state.y, &oracle) {
            final_metrics.insert("gap".into(), json!(report.gap));
        }
        let c_final = crate::solver::Schedule::from_config(cfg).penalty_at(state.k);
        if let Ok(report) =
            stationarity_residual(&bundle.spec, &state.x, &state.y, c_final, 1.0, &oracle)
        {
            final_metrics.insert("residual".into(), json!(report.value));
        }
    }
    if let Some(dataset) = &bundle.dataset {
        final_metrics.insert(
            "test_error".into(),
            json!(squared_error_sum(&dataset.test, &state.y)),
        );
    }

    Ok(RunManifest {
        problem: bundle.name.to_string(),
        params: bundle.params.clone(),
        config: effective_config_map(bundle),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        start_unix_s,
        stop_reason: result.stop_reason.name().to_string(),
        iterations: state.k,
        wall_time_s: result.wall_time_s,
        failure: result.failure.clone(),
        final_metrics,
    })
}

/// Run one configuration into a directory, producing `trace.csv` and
/// `manifest.json`.
pub fn run_to_dir(parsed: &ParsedConfig, out_dir: &Path) -> Result<RunResult> {
    fs::create_dir_all(out_dir).map_err(|e| MehaError::io(out_dir, e))?;
    let start_unix_s = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let bundle = &parsed.bundle;
    let result = run_with_plan(
        &bundle.spec,
        &bundle.default_config,
        &bundle.init,
        bundle.solution.as_ref(),
        &TracePlan::default(),
    )?;
    write_trace_csv(&result.trace, &out_dir.join("trace.csv"))?;
    let manifest = build_manifest(bundle, &result, start_unix_s)?;
    let pretty = serde_json::to_string_pretty(&manifest.to_value())
        .map_err(|e| MehaError::InvalidArgument(format!("manifest serialization: {e}")))?;
    fs::write(out_dir.join("manifest.json"), pretty)
        .map_err(|e| MehaError::io(out_dir.join("manifest.json"), e))?;
    Ok(result)
}

fn exit_code_for(result: &RunResult) -> i32 {
    match result.stop_reason {
        StopReason::TolMet | StopReason::MaxIters => 0,
        StopReason::NumericalFailure => 2,
    }
}

/// `run` subcommand: execute one configuration. Exit 0 on normal
/// termination, 1 on I/O or configuration errors, 2 on numerical failure.
pub fn cmd_run(config_path: &Path, out_dir: &Path) -> i32 {
    let parsed = match parse_config(config_path) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match run_to_dir(&parsed, out_dir) {
        Ok(result) => {
            println!(
                "{}: stop_reason={} iterations={} wall_time_s={:.3}",
                parsed.bundle.name,
                result.stop_reason.name(),
                result.final_state.k,
                result.wall_time_s
            );
            exit_code_for(&result)
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct SweepAxis {
    key: String,
    values: Vec<Value>,
}

fn sweep_axes(map: &Map<String, Value>, path: &Path) -> Result<Vec<SweepAxis>> {
    let mut axes = Vec::new();
    for (key, value) in map {
        if let Value::Array(values) = value {
            if !SWEEP_KEYS.contains(&key.as_str()) {
                return Err(config_error(
                    path,
                    format!("key {key:?} cannot carry a list of values"),
                ));
            }
            if values.is_empty() {
                return Err(config_error(path, format!("key {key:?} has an empty list")));
            }
            axes.push(SweepAxis {
                key: key.clone(),
                values: values.clone(),
            });
        }
    }
    axes.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(axes)
}

/// `sweep` subcommand: expand list-valued keys into a cross product and run
/// every combination concurrently (bounded by `jobs`), one subdirectory per
/// run plus a `sweep_summary.csv`.
pub fn cmd_sweep(config_path: &Path, out_dir: &Path, jobs: usize) -> i32 {
    match sweep_inner(config_path, out_dir, jobs) {
        Ok(SweepOutcome::AllOk) => 0,
        Ok(SweepOutcome::ChildError) => 1,
        Ok(SweepOutcome::NumericalFailure) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum SweepOutcome {
    AllOk,
    /// At least one child hit a configuration or I/O error.
    ChildError,
    /// All children ran, at least one ended in numerical failure.
    NumericalFailure,
}

fn sweep_inner(config_path: &Path, out_dir: &Path, jobs: usize) -> Result<SweepOutcome> {
    let text = fs::read_to_string(config_path).map_err(|e| MehaError::io(config_path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| config_error(config_path, format!("invalid JSON: {e}")))?;
    let Value::Object(base) = value else {
        return Err(config_error(config_path, "configuration must be a JSON object"));
    };
    let axes = sweep_axes(&base, config_path)?;
    let total: usize = axes.iter().map(|a| a.values.len()).product::<usize>().max(1);

    // Materialize each combination as a flat scalar config.
    let mut combos: Vec<Map<String, Value>> = Vec::with_capacity(total);
    for idx in 0..total {
        let mut map = base.clone();
        let mut rem = idx;
        for axis in &axes {
            let i = rem % axis.values.len();
            rem /= axis.values.len();
            map.insert(axis.key.clone(), axis.values[i].clone());
        }
        combos.push(map);
    }

    fs::create_dir_all(out_dir).map_err(|e| MehaError::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| MehaError::InvalidArgument(format!("thread pool: {e}")))?;

    struct Row {
        dir: String,
        values: Vec<String>,
        outcome: std::result::Result<(StopReason, usize, f64, Option<f64>, f64), String>,
    }

    let rows: Vec<Row> = pool.install(|| {
        combos
            .par_iter()
            .enumerate()
            .map(|(idx, map)| {
                let dir_name = format!("run_{idx:04}");
                let run_dir = out_dir.join(&dir_name);
                let values = axes
                    .iter()
                    .map(|a| map.get(&a.key).map(|v| v.to_string()).unwrap_or_default())
                    .collect();
                let outcome = parse_config_map(map.clone(), config_path)
                    .and_then(|parsed| {
                        let result = run_to_dir(&parsed, &run_dir)?;
                        let last_err = result.trace.last().and_then(|r| r.err_x_rel);
                        let f_val = parsed
                            .bundle
                            .spec
                            .eval_upper(&result.final_state.x, &result.final_state.y);
                        Ok((
                            result.stop_reason,
                            result.final_state.k,
                            f_val,
                            last_err,
                            result.wall_time_s,
                        ))
                    })
                    .map_err(|e| e.to_string());
                Row {
                    dir: dir_name,
                    values,
                    outcome,
                }
            })
            .collect()
    });

    let mut summary = String::new();
    summary.push_str("run");
    for axis in &axes {
        summary.push(',');
        summary.push_str(&axis.key);
    }
    summary.push_str(",stop_reason,steps,F_val,err_x_rel,wall_time_s\n");
    let mut any_failure = false;
    let mut any_error = false;
    for row in &rows {
        summary.push_str(&row.dir);
        for v in &row.values {
            summary.push(',');
            summary.push_str(v);
        }
        match &row.outcome {
            Ok((reason, steps, f_val, err, wall)) => {
                if *reason == StopReason::NumericalFailure {
                    any_failure = true;
                }
                summary.push_str(&format!(
                    ",{},{steps},{f_val},{},{wall:.6}\n",
                    reason.name(),
                    err.map(|e| e.to_string()).unwrap_or_default(),
                ));
            }
            Err(msg) => {
                any_error = true;
                summary.push_str(&format!(",error:{},,,,\n", msg.replace(',', ";")));
            }
        }
    }
    fs::write(out_dir.join("sweep_summary.csv"), summary)
        .map_err(|e| MehaError::io(out_dir.join("sweep_summary.csv"), e))?;
    Ok(if any_error {
        SweepOutcome::ChildError
    } else if any_failure {
        SweepOutcome::NumericalFailure
    } else {
        SweepOutcome::AllOk
    })
}

/// `check` subcommand: run the built-in verification battery and print a
/// line per check. Exit 0 only when every check passes.
pub fn cmd_check() -> i32 {
    match run_check_battery() {
        Ok((report, passed)) => {
            println!(
                "check prox_vs_oracle: {} (max error {:.3e})",
                if passed.prox { "PASS" } else { "FAIL" },
                report.prox_oracle_max_error
            );
            println!(
                "check moreau_gradient_fd: {} (max rel error {:.3e})",
                if passed.fd { "PASS" } else { "FAIL" },
                report.max_grad_fd_error
            );
            println!(
                "check contraction: {} (max ratio {:.6} vs bound {:.6}, {} violations)",
                if passed.contraction { "PASS" } else { "FAIL" },
                report.contraction_max_ratio,
                report.contraction_sigma_bound,
                report.contraction_violations
            );
            println!(
                "check stationarity_at_solutions: {} (max residual {:.3e})",
                if passed.stationarity { "PASS" } else { "FAIL" },
                report.stationarity_max_residual
            );
            if let Some(rate) = report.fitted_rate_exponent {
                println!("info fitted_rate_exponent: {rate:.3}");
            }
            if passed.all() {
                println!("all checks passed");
                0
            } else {
                eprintln!("self-check failed");
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct CheckFlags {
    prox: bool,
    fd: bool,
    contraction: bool,
    stationarity: bool,
}

impl CheckFlags {
    fn all(&self) -> bool {
        self.prox && self.fd && self.contraction && self.stationarity
    }
}

fn run_check_battery() -> Result<(DiagnosticsReport, CheckFlags)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // Prox closed forms against the brute-force grid oracle.
    let mut prox_max = 0.0f64;
    let mut prox_ok = true;
    let resolution = 200_000;
    for _ in 0..100 {
        let theta: f64 = rng.random_range(-3.0..3.0);
        let tau: f64 = rng.random_range(1e-6..2.0);
        let halfwidth = theta.abs() + tau + 1.0;
        let grid = prox_bruteforce_oracle(|u| u.abs(), tau, theta, halfwidth, resolution)?;
        let closed = soft_threshold(&Array1::from(vec![theta]), tau)?[0];
        let err = (grid - closed).abs();
        prox_max = prox_max.max(err);
        if err > 2.0 * oracle_grid_spacing(halfwidth, resolution) {
            prox_ok = false;
        }
    }
    for _ in 0..100 {
        // Group shrinkage reduces to scalar shrinkage of the norm along the
        // ray through theta.
        let dim = 4;
        let theta = Array1::from(
            (0..dim)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<f64>>(),
        );
        let w: f64 = rng.random_range(1e-6..2.0);
        let norm = theta.dot(&theta).sqrt();
        if norm < 1e-9 {
            continue;
        }
        let halfwidth = norm + w + 1.0;
        let radial = prox_bruteforce_oracle(|u| u.abs(), w, norm, halfwidth, resolution)?;
        let expected = &theta * (radial.max(0.0) / norm);
        let groups = vec![(0..dim).collect::<Vec<usize>>()];
        let actual = group_soft_threshold(&theta, &groups, &[w])?;
        let err = (&actual - &expected).mapv(|v| v * v).sum().sqrt();
        prox_max = prox_max.max(err);
        if err > 2.0 * oracle_grid_spacing(halfwidth, resolution) {
            prox_ok = false;
        }
    }

    // Envelope gradient against central finite differences.
    let mut fd_max = 0.0f64;
    for bundle in [make_merely_convex(4)?, make_lasso_toy(6)?] {
        let spec = &bundle.spec;
        let gamma = bundle.default_config.gamma;
        let eta = bundle.default_config.eta0;
        let oracle = InnerOracle::new(eta, gamma, 1e-12, 200_000);
        let h = 1e-6;
        for _ in 0..5 {
            let x = spec.project_x(&Array1::from(
                (0..spec.n())
                    .map(|_| rng.random_range(0.1..0.9))
                    .collect::<Vec<_>>(),
            ));
            let y = Array1::from(
                (0..spec.m())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>(),
            );
            let eval = oracle.solve(spec, &x, &y, &y)?;
            let v_at = |x: &Array1<f64>, y: &Array1<f64>| -> Result<f64> {
                Ok(oracle.solve(spec, x, y, y)?.value)
            };
            for i in 0..spec.n() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (v_at(&xp, &y)? - v_at(&xm, &y)?) / (2.0 * h);
                fd_max = fd_max.max((eval.grad_x[i] - fd).abs() / fd.abs().max(1.0));
            }
            for i in 0..spec.m() {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[i] += h;
                ym[i] -= h;
                let fd = (v_at(&x, &yp)? - v_at(&x, &ym)?) / (2.0 * h);
                fd_max = fd_max.max((eval.grad_y[i] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    let fd_ok = fd_max <= 1e-5;

    // Measured inner contraction against the closed-form factor.
    let toy = make_strong_convex_toy(10)?;
    let gamma = 0.5;
    let eta = 0.1;
    let sigma = contraction_factor(eta, gamma, 0.0, 0.0)?;
    let oracle = InnerOracle::new(eta, gamma, 1e-13, 200_000);
    let mut violations = 0usize;
    let mut max_ratio = 0.0f64;
    for _ in 0..100 {
        let dim = toy.spec.n();
        let sample = |rng: &mut ChaCha8Rng| {
            Array1::from(
                (0..dim)
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect::<Vec<_>>(),
            )
        };
        let x = sample(&mut rng);
        let y = sample(&mut rng);
        let theta = sample(&mut rng);
        let star = oracle.solve(&toy.spec, &x, &y, &y)?.theta_star;
        let next = theta_step(&toy.spec, &x, &y, &theta, eta, gamma)?;
        let before = (&theta - &star).mapv(|v| v * v).sum().sqrt();
        let after = (&next - &star).mapv(|v| v * v).sum().sqrt();
        if before > 1e-10 {
            let ratio = after / before;
            max_ratio = max_ratio.max(ratio);
            if ratio > sigma + 1e-9 {
                violations += 1;
            }
        }
    }
    let contraction_ok = violations == 0;

    // Stationarity surrogate at closed-form stationary points of the
    // penalized problem.
    let mut stat_max = 0.0f64;
    {
        let bundle = make_strong_convex_toy(6)?;
        let gamma = 2.0;
        let c = 5.0;
        let w = gamma * c / (gamma + 1.0);
        let x = Array1::from_elem(6, (1.0 + w) / (1.0 + 2.0 * w));
        let y = Array1::from_elem(6, w / (1.0 + 2.0 * w));
        let oracle = InnerOracle::new(0.2, gamma, 1e-12, 200_000);
        let report = stationarity_residual(&bundle.spec, &x, &y, c, 1.0, &oracle)?;
        stat_max = stat_max.max(report.value);
    }
    {
        // The known solution of the merely convex instance is stationary
        // for the penalized problem at every penalty value.
        let bundle = make_merely_convex(5)?;
        let x = Array1::ones(5);
        let y = Array1::ones(10);
        let oracle = InnerOracle::new(
            bundle.default_config.eta0,
            bundle.default_config.gamma,
            1e-12,
            200_000,
        );
        for c in [0.5, 5.0, 500.0] {
            let report = stationarity_residual(&bundle.spec, &x, &y, c, 1.0, &oracle)?;
            stat_max = stat_max.max(report.value);
        }
    }
    let stationarity_ok = stat_max <= 1e-8;

    // Informational: decay exponent of the stationarity surrogate on a
    // short conservative toy run.
    let fitted_rate_exponent = {
        let bundle = make_strong_convex_toy(10)?;
        let mut cfg = bundle.default_config.clone();
        cfg.p = 0.0;
        cfg.alpha0 = 1e-2;
        cfg.beta0 = 1e-2;
        cfg.eta0 = 0.1;
        cfg.gamma = 0.2;
        cfg.max_iters = 2_000;
        cfg.stop_rule = StopRule::MaxItersOnly;
        cfg.inner_oracle_tol = 1e-10;
        let result = run_with_plan(
            &bundle.spec,
            &cfg,
            &bundle.init,
            bundle.solution.as_ref(),
            &TracePlan::default(),
        )?;
        rate_fit(&result.trace, RateField::ResidualSurrogate, 100..=2_000).ok()
    };

    let report = DiagnosticsReport {
        max_grad_fd_error: fd_max,
        prox_oracle_max_error: prox_max,
        contraction_violations: violations,
        fitted_rate_exponent,
        contraction_max_ratio: max_ratio,
        contraction_sigma_bound: sigma,
        stationarity_max_residual: stat_max,
    };
    let flags = CheckFlags {
        prox: prox_ok,
        fd: fd_ok,
        contraction: contraction_ok,
        stationarity: stationarity_ok,
    };
    Ok((report, flags))
}

/// Compare two trace files column-by-column, ignoring the wall-time column
/// (the only nondeterministic one).
pub fn traces_equal_modulo_time(a: &Path, b: &Path) -> Result<bool> {
    let ta = read_trace_csv(a)?;
    let tb = read_trace_csv(b)?;
    if ta.len() != tb.len() {
        return Ok(false);
    }
    Ok(ta.iter().zip(tb.iter()).all(|(ra, rb)| {
        ra.k == rb.k
            && ra.c_k.to_bits() == rb.c_k.to_bits()
            && ra.alpha_k.to_bits() == rb.alpha_k.to_bits()
            && ra.beta_k.to_bits() == rb.beta_k.to_bits()
            && ra.f_val.to_bits() == rb.f_val.to_bits()
            && opt_bits(ra.gap) == opt_bits(rb.gap)
            && opt_bits(ra.residual_surrogate) == opt_bits(rb.residual_surrogate)
            && opt_bits(ra.merit) == opt_bits(rb.merit)
            && opt_bits(ra.err_x_rel) == opt_bits(rb.err_x_rel)
            && opt_bits(ra.err_y_rel) == opt_bits(rb.err_y_rel)
            && ra.theta_inner_residual.to_bits() == rb.theta_inner_residual.to_bits()
    }))
}

fn opt_bits(v: Option<f64>) -> Option<u64> {
    v.map(f64::to_bits)
}

/// Convenience used by integration tests: write a config map to a file.
pub fn write_config(map: &Map<String, Value>, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&Value::Object(map.clone()))
        .map_err(|e| MehaError::InvalidArgument(format!("config serialization: {e}")))?;
    fs::write(path, text).map_err(|e| MehaError::io(path, e))
}
