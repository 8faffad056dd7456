//! JSON and CSV report files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::experiment::{ExperimentReport, RunRecord, SCHEMA_VERSION};

pub const JSON_FILE: &str = "report.json";
pub const CSV_FILE: &str = "runs.csv";

const CSV_HEADER: &[&str] = &[
    "scenario",
    "repetition",
    "mode",
    "T",
    "nredu",
    "n_fail",
    "location",
    "failure_iteration",
    "C",
    "iterations",
    "wasted_iterations",
    "rollback_target",
    "t",
    "t0",
    "relative_overhead",
    "reconstruction_overhead",
    "residual_drift",
    "converged",
    "bytes_spmv",
    "bytes_redundant",
    "bytes_gather",
    "bytes_checkpoint",
    "bytes_scalar",
    "bytes_total",
    "error",
];

#[derive(Serialize)]
struct CsvRow<'a> {
    scenario: &'static str,
    repetition: usize,
    mode: String,
    period: usize,
    nredu: usize,
    n_fail: usize,
    location: &'a str,
    failure_iteration: Option<usize>,
    c: Option<usize>,
    iterations: Option<usize>,
    wasted_iterations: Option<usize>,
    rollback_target: Option<usize>,
    t: Option<f64>,
    t0: Option<f64>,
    relative_overhead: Option<f64>,
    reconstruction_overhead: Option<f64>,
    residual_drift: Option<f64>,
    converged: bool,
    bytes_spmv: u64,
    bytes_redundant: u64,
    bytes_gather: u64,
    bytes_checkpoint: u64,
    bytes_scalar: u64,
    bytes_total: u64,
    error: Option<&'a str>,
}

impl<'a> From<&'a RunRecord> for CsvRow<'a> {
    fn from(r: &'a RunRecord) -> Self {
        Self {
            scenario: r.scenario.label(),
            repetition: r.repetition,
            mode: r.mode.to_string(),
            period: r.period,
            nredu: r.nredu,
            n_fail: r.n_fail,
            location: &r.location,
            failure_iteration: r.failure_iteration,
            c: r.c,
            iterations: r.iterations,
            wasted_iterations: r.wasted_iterations,
            rollback_target: r.rollback_target,
            t: r.t,
            t0: r.t0,
            relative_overhead: r.relative_overhead,
            reconstruction_overhead: r.reconstruction_overhead,
            residual_drift: r.residual_drift,
            converged: r.converged,
            bytes_spmv: r.bytes.spmv,
            bytes_redundant: r.bytes.redundant,
            bytes_gather: r.bytes.gather,
            bytes_checkpoint: r.bytes.checkpoint,
            bytes_scalar: r.bytes.scalar,
            bytes_total: r.bytes.total(),
            error: r.error.as_deref(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one CSV row per run, header first, even when `runs` is empty.
pub fn write_csv(runs: &[RunRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(CSV_HEADER)?;
    for r in runs {
        w.serialize(CsvRow::from(r))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes `report.json` and `runs.csv` into `dir`, creating it if needed.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json_path = dir.join(JSON_FILE);
    let csv_path = dir.join(CSV_FILE);
    let json = serde_json::to_string_pretty(report)?;
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    write_csv(&report.runs, &csv_path)?;
    Ok((json_path, csv_path))
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let report: ExperimentReport = serde_json::from_str(&text)?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::Schema(report.schema_version));
    }
    Ok(report)
}

/// Human-readable per-scenario table.
pub fn render_summary(report: &ExperimentReport) -> String {
    let fmt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    let mut out = format!(
        "n = {}  nodes = {}  mode = {}  T = {}  nredu = {}  C = {}  t0 = {}s\n",
        report.n,
        report.spec.nodes,
        report.spec.mode,
        report.spec.period,
        report.spec.nredu,
        report.c.map_or("-".into(), |c| c.to_string()),
        fmt(report.t0, 4),
    );
    out.push_str("scenario      runs  failed  iterations  t[s]      overhead  wasted  drift\n");
    for s in &report.summary {
        out.push_str(&format!(
            "{:<13} {:>4}  {:>6}  {:>10}  {:<8}  {:>8}  {:>6}  {}\n",
            s.scenario.label(),
            s.runs,
            s.failed_runs,
            fmt(s.median_iterations, 1),
            fmt(s.median_t, 4),
            fmt(s.relative_overhead, 3),
            fmt(s.median_wasted, 1),
            s.median_drift.map_or("-".into(), |d| format!("{d:.3e}")),
        ));
    }
    out
}
