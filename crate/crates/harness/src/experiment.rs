//! Runs the reference, failure-free and failure scenarios of an experiment
//! and derives overhead, wasted-iteration and drift metrics.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use esrp_core::{
    generate_poisson2d, load_matrix_market, make_block_row_partition, ByteCounters,
    FailureEvent, Mode, Problem, RecoveryReport, SolveOutcome, Solver, SolverConfig,
    SparseMatrix,
};

use crate::config::{ExperimentSpec, FailureAt, MatrixSource};
use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Iteration two before the end of the interval of length `t` containing
/// `c / 2`; `c / 2` itself when `t = 1`.
pub fn worst_case_failure_iteration(c: usize, t: usize) -> Result<usize> {
    if t == 0 {
        return Err(HarnessError::InvalidSpec("interval must be positive".into()));
    }
    let half = c / 2;
    let j = if t == 1 {
        half
    } else {
        (half / t + 1) * t - 2
    };
    if j >= c {
        return Err(HarnessError::InvalidSpec(format!(
            "no failure point before convergence: C = {c}, T = {t}"
        )));
    }
    Ok(j)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    /// `(||r_end|| - ||b - A x_end||) / ||b - A x_end||`.
    pub value: f64,
    /// The true residual vanished; `value` is reported as 0.
    pub exact: bool,
}

pub fn residual_drift(a: &SparseMatrix, b: &[f64], x: &[f64], r: &[f64]) -> Result<Drift> {
    let ax = a.mul_vec(x)?;
    if b.len() != ax.len() || r.len() != ax.len() {
        return Err(esrp_core::Error::LengthMismatch {
            expected: ax.len(),
            actual: if b.len() != ax.len() { b.len() } else { r.len() },
        }
        .into());
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|e| e * e).sum::<f64>().sqrt();
    let true_norm = norm(&mut b.iter().zip(&ax).map(|(b, a)| b - a));
    let rec_norm = norm(&mut r.iter().copied());
    if true_norm == 0.0 {
        return Ok(Drift {
            value: 0.0,
            exact: true,
        });
    }
    Ok(Drift {
        value: (rec_norm - true_norm) / true_norm,
        exact: false,
    })
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Reference,
    FailureFree,
    Failure,
}

impl Scenario {
    pub fn label(self) -> &'static str {
        match self {
            Scenario::Reference => "reference",
            Scenario::FailureFree => "failure_free",
            Scenario::Failure => "failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: Scenario,
    pub repetition: usize,
    pub mode: Mode,
    pub period: usize,
    pub nredu: usize,
    pub n_fail: usize,
    pub location: String,
    pub failure_iteration: Option<usize>,
    pub converged: bool,
    pub error: Option<String>,
    /// Failure-free reference iteration count `C`.
    pub c: Option<usize>,
    /// Iteration bodies performed, including discarded ones.
    pub iterations: Option<usize>,
    pub final_iteration: Option<usize>,
    pub t: Option<f64>,
    pub t0: Option<f64>,
    pub relative_overhead: Option<f64>,
    pub reconstruction_overhead: Option<f64>,
    pub wasted_iterations: Option<usize>,
    pub rollback_target: Option<usize>,
    pub restarted: Option<bool>,
    pub bytes: ByteCounters,
    pub residual_drift: Option<f64>,
    pub exact_solution: bool,
    pub final_rel_residual: Option<f64>,
    pub true_rel_residual: Option<f64>,
    pub recovery: Option<RecoveryReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: Scenario,
    pub runs: usize,
    pub failed_runs: usize,
    pub median_iterations: Option<f64>,
    pub median_t: Option<f64>,
    /// `(median t - t0) / t0`.
    pub relative_overhead: Option<f64>,
    pub median_wasted: Option<f64>,
    pub median_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub spec: ExperimentSpec,
    pub n: usize,
    pub c: Option<usize>,
    pub t0: Option<f64>,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<ScenarioSummary>,
}

impl ExperimentReport {
    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    /// Recomputes the per-scenario medians from the run records.
    pub fn reaggregate(&mut self) {
        self.summary = summarize(&self.runs, self.t0);
    }
}

pub fn summarize(runs: &[RunRecord], t0: Option<f64>) -> Vec<ScenarioSummary> {
    let mut scenarios: Vec<Scenario> = runs.iter().map(|r| r.scenario).collect();
    scenarios.sort();
    scenarios.dedup();
    scenarios
        .into_iter()
        .map(|scenario| {
            let sel: Vec<&RunRecord> = runs.iter().filter(|r| r.scenario == scenario).collect();
            let ok: Vec<&&RunRecord> = sel.iter().filter(|r| r.error.is_none()).collect();
            let collect = |f: &dyn Fn(&RunRecord) -> Option<f64>| {
                median(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let median_t = collect(&|r| r.t);
            ScenarioSummary {
                scenario,
                runs: sel.len(),
                failed_runs: sel.len() - ok.len(),
                median_iterations: collect(&|r| r.iterations.map(|v| v as f64)),
                median_t,
                relative_overhead: overhead(median_t, t0),
                median_wasted: collect(&|r| r.wasted_iterations.map(|v| v as f64)),
                median_drift: collect(&|r| r.residual_drift),
            }
        })
        .collect()
}

fn overhead(t: Option<f64>, t0: Option<f64>) -> Option<f64> {
    match (t, t0) {
        (Some(t), Some(t0)) if t0 > 0.0 => Some((t - t0) / t0),
        _ => None,
    }
}

/// Loads or generates the matrix, draws the seeded right-hand side and
/// distributes the problem over `spec.nodes` block rows.
pub fn build_problem(spec: &ExperimentSpec) -> Result<Arc<Problem>> {
    let a = match &spec.matrix {
        MatrixSource::Poisson2d { side } => generate_poisson2d(*side)?,
        MatrixSource::MatrixMarket { path } => load_matrix_market(path)?,
    };
    let n = a.n();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let part = make_block_row_partition(n, spec.nodes)?;
    Ok(Arc::new(Problem::new(a, b, None, part, spec.max_block)?))
}

fn solver_config(spec: &ExperimentSpec, mode: Mode) -> SolverConfig {
    SolverConfig {
        rtol: spec.rtol,
        mode,
        period: spec.period,
        nredu: spec.nredu,
        inner_max_block: spec.max_block,
        ..SolverConfig::default()
    }
}

struct RunContext<'a> {
    spec: &'a ExperimentSpec,
    problem: &'a Problem,
}

impl RunContext<'_> {
    fn blank(&self, scenario: Scenario, repetition: usize, mode: Mode) -> RunRecord {
        RunRecord {
            scenario,
            repetition,
            mode,
            period: self.spec.period,
            nredu: self.spec.nredu,
            n_fail: if scenario == Scenario::Failure { self.spec.failures } else { 0 },
            location: if scenario == Scenario::Failure {
                self.spec.location.label()
            } else {
                "-".into()
            },
            failure_iteration: None,
            converged: false,
            error: None,
            c: None,
            iterations: None,
            final_iteration: None,
            t: None,
            t0: None,
            relative_overhead: None,
            reconstruction_overhead: None,
            wasted_iterations: None,
            rollback_target: None,
            restarted: None,
            bytes: ByteCounters::default(),
            residual_drift: None,
            exact_solution: false,
            final_rel_residual: None,
            true_rel_residual: None,
            recovery: None,
        }
    }

    fn fill(&self, rec: &mut RunRecord, result: esrp_core::Result<SolveOutcome>) {
        let out = match result {
            Ok(out) => out,
            Err(e) => {
                rec.error = Some(e.to_string());
                return;
            }
        };
        let a = self.problem.matrix();
        let b = self.problem.rhs();
        rec.converged = true;
        rec.iterations = Some(out.iterations);
        rec.final_iteration = Some(out.final_iteration);
        rec.t = Some(out.elapsed_secs);
        rec.bytes = out.counters;
        rec.final_rel_residual = Some(out.rel_residual).filter(|v| v.is_finite());
        match residual_drift(a, b, &out.x, &out.r) {
            Ok(d) => {
                rec.residual_drift = Some(d.value);
                rec.exact_solution = d.exact;
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        if let Ok(ax) = a.mul_vec(&out.x) {
            let res: f64 = b.iter().zip(&ax).map(|(b, a)| (b - a).powi(2)).sum::<f64>().sqrt();
            let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            rec.true_rel_residual = Some(if bn > 0.0 { res / bn } else { res });
        }
        if let Some(report) = out.recovery {
            rec.wasted_iterations = Some(report.wasted_iterations);
            rec.rollback_target = Some(report.rollback_target);
            rec.restarted = Some(report.restarted);
            rec.reconstruction_overhead = Some(report.elapsed_secs);
            rec.recovery = Some(report);
        }
    }
}

/// Executes the reference plain runs, the failure-free resilient runs and,
/// when `spec.failures > 0`, the failure runs. Sub-run errors are recorded
/// in the affected records; only problem setup errors are returned.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let problem = build_problem(spec)?;
    let ctx = RunContext {
        spec,
        problem: &problem,
    };
    let mut runs = Vec::new();

    for rep in 0..spec.reps {
        let mut rec = ctx.blank(Scenario::Reference, rep, Mode::Plain);
        let result = Solver::new(Arc::clone(&problem), solver_config(spec, Mode::Plain))
            .and_then(|s| s.run(None));
        ctx.fill(&mut rec, result);
        runs.push(rec);
    }
    let c = runs
        .iter()
        .find(|r| r.error.is_none())
        .and_then(|r| r.final_iteration);
    let t0 = median(&runs.iter().filter_map(|r| r.t).collect::<Vec<_>>());

    if spec.mode == Mode::Plain {
        let copies: Vec<RunRecord> = runs
            .iter()
            .map(|r| RunRecord {
                scenario: Scenario::FailureFree,
                ..r.clone()
            })
            .collect();
        runs.extend(copies);
    } else {
        for rep in 0..spec.reps {
            let mut rec = ctx.blank(Scenario::FailureFree, rep, spec.mode);
            let result = Solver::new(Arc::clone(&problem), solver_config(spec, spec.mode))
                .and_then(|s| s.run(None));
            ctx.fill(&mut rec, result);
            runs.push(rec);
        }
    }

    if spec.failures > 0 {
        let period = if spec.mode == Mode::Esr { 1 } else { spec.period };
        let at = match (spec.at, c) {
            (FailureAt::Iteration(j), _) => Ok(j),
            (FailureAt::Worst, Some(c)) => worst_case_failure_iteration(c, period),
            (FailureAt::Worst, None) => Err(HarnessError::InvalidSpec(
                "reference run failed, worst-case iteration unknown".into(),
            )),
        };
        for rep in 0..spec.reps {
            let mut rec = ctx.blank(Scenario::Failure, rep, spec.mode);
            match &at {
                Ok(j) => {
                    let first = spec.location.first_rank(spec.nodes);
                    let event = FailureEvent::contiguous(*j, first, spec.failures, spec.nodes);
                    rec.failure_iteration = Some(*j);
                    let result = Solver::new(Arc::clone(&problem), solver_config(spec, spec.mode))
                        .and_then(|s| s.run(Some(&event)));
                    ctx.fill(&mut rec, result);
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            runs.push(rec);
        }
    }

    for rec in &mut runs {
        rec.c = c;
        rec.t0 = t0;
        rec.relative_overhead = overhead(rec.t, t0);
        rec.reconstruction_overhead = match (rec.reconstruction_overhead, t0) {
            (Some(t), Some(t0)) if t0 > 0.0 => Some(t / t0),
            _ => None,
        };
    }
    let summary = summarize(&runs, t0);
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        n: problem.n(),
        c,
        t0,
        runs,
        summary,
    })
}
