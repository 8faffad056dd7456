//! Distributed preconditioned conjugate gradient with optional resilience.
//!
//! All modes share one iteration body and differ only in how `q = A p` is
//! produced and what is stored alongside it:
//!
//! * `plain`: ordinary SpMV every iteration.
//! * `esr`: ASpMV every iteration, redundant queue of two copies.
//! * `esrp`: ASpMV only in storage stages (iterations `kT` and `kT + 1`,
//!   `j > 2`), queue of three copies, node-local duplicates of
//!   `x, r, z, p` and beta at the end of each stage.
//! * `imcr`: ordinary SpMV plus an explicit buddy checkpoint every `T`
//!   iterations.
//!
//! A failure event for iteration `j` strikes right after that iteration's
//! product phase (including any storage bookkeeping) and before `alpha` is
//! formed. After recovery the solver resumes at the recovered iteration by
//! recomputing `q` with a plain SpMV.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{ByteCounters, Cluster, ClusterConfig, FailureEvent};
use crate::error::{Error, Result};
use crate::precond::apply_blocks;
use crate::problem::{Problem, DEFAULT_MAX_BLOCK};
use crate::recovery::{self, imcr_checkpoint, RecoveryReport};
use crate::redundancy::{aspmv, product, spmv, Operand, RedundantQueue};
use crate::sparse::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Plain,
    Esr,
    Esrp,
    Imcr,
}

impl Mode {
    pub fn is_resilient(self) -> bool {
        self != Mode::Plain
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::Esr => "esr",
            Mode::Esrp => "esrp",
            Mode::Imcr => "imcr",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" | "pcg" => Ok(Mode::Plain),
            "esr" => Ok(Mode::Esr),
            "esrp" => Ok(Mode::Esrp),
            "imcr" | "cr" => Ok(Mode::Imcr),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Converged once `||r||_2 / ||b||_2 < rtol`.
    pub rtol: f64,
    /// Iteration cap; `None` means `10 n`.
    pub max_iter: Option<usize>,
    pub mode: Mode,
    /// Checkpointing interval `T`.
    pub period: usize,
    /// Number of simultaneous node failures to tolerate.
    pub nredu: usize,
    /// Relative residual target of the reconstruction's inner solve.
    pub inner_rtol: f64,
    pub inner_max_block: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            max_iter: None,
            mode: Mode::Plain,
            period: 1,
            nredu: 1,
            inner_rtol: 1e-14,
            inner_max_block: DEFAULT_MAX_BLOCK,
        }
    }
}

impl SolverConfig {
    pub fn plain() -> Self {
        Self::default()
    }

    pub fn esr(nredu: usize) -> Self {
        Self {
            mode: Mode::Esr,
            nredu,
            ..Self::default()
        }
    }

    pub fn esrp(period: usize, nredu: usize) -> Self {
        Self {
            mode: Mode::Esrp,
            period,
            nredu,
            ..Self::default()
        }
    }

    pub fn imcr(period: usize, nredu: usize) -> Self {
        Self {
            mode: Mode::Imcr,
            period,
            nredu,
            ..Self::default()
        }
    }

    /// Checks the configuration and returns the mode actually run:
    /// `esrp` with `T = 1` is plain ESR, `T = 2` is rejected.
    pub fn effective_mode(&self) -> Result<Mode> {
        if !(self.rtol > 0.0 && self.rtol.is_finite()) {
            return Err(Error::InvalidConfig(format!("rtol must be positive, got {}", self.rtol)));
        }
        if !(self.inner_rtol > 0.0) {
            return Err(Error::InvalidConfig("inner_rtol must be positive".into()));
        }
        if self.mode.is_resilient() && self.nredu == 0 {
            return Err(Error::InvalidConfig("nredu must be at least 1".into()));
        }
        match (self.mode, self.period) {
            (Mode::Esrp | Mode::Imcr, 0) => {
                Err(Error::InvalidConfig("checkpoint interval must be positive".into()))
            }
            (Mode::Esrp, 1) => Ok(Mode::Esr),
            (Mode::Esrp, 2) => Err(Error::InvalidConfig(
                "ESRP needs T >= 3; T = 2 stores every iteration, use ESR".into(),
            )),
            (mode, _) => Ok(mode),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// First ASpMV of a storage stage.
    StorageFirst,
    /// Second ASpMV of a storage stage; duplicates refreshed.
    StorageSecond,
    /// Every-iteration ASpMV of ESR.
    Redundant,
    Checkpoint,
    Failure,
    Recovery,
    Rollback,
    Restart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    /// Monotone position in the log.
    pub step: usize,
    /// Solver iteration `j` (repeats after a rollback).
    pub iteration: usize,
    pub rel_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub step: usize,
    pub iteration: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub residuals: Vec<ResidualEntry>,
    pub events: Vec<LogEvent>,
}

impl TrajectoryLog {
    fn record(&mut self, iteration: usize, rel_residual: f64) {
        let step = self.residuals.len();
        self.residuals.push(ResidualEntry {
            step,
            iteration,
            rel_residual,
        });
    }

    fn event(&mut self, iteration: usize, kind: EventKind) {
        self.events.push(LogEvent {
            step: self.residuals.len(),
            iteration,
            kind,
        });
    }

    /// Relative residual most recently logged for iteration `j`.
    pub fn residual_at(&self, j: usize) -> Option<f64> {
        self.residuals
            .iter()
            .rev()
            .find(|e| e.iteration == j)
            .map(|e| e.rel_residual)
    }

    /// Residuals logged after step `from_step`, in order.
    pub fn residuals_after(&self, from_step: usize) -> &[ResidualEntry] {
        let k = self.residuals.partition_point(|e| e.step < from_step);
        &self.residuals[k..]
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub x: Vec<f64>,
    /// Recursively updated residual at convergence.
    pub r: Vec<f64>,
    /// Iteration index `j` at which the convergence test passed.
    pub final_iteration: usize,
    /// Completed iteration bodies, including discarded ones.
    pub iterations: usize,
    pub rel_residual: f64,
    pub aspmv_calls: usize,
    pub counters: ByteCounters,
    pub log: TrajectoryLog,
    pub recovery: Option<RecoveryReport>,
    pub elapsed_secs: f64,
}

/// Points in the iteration at which an observer sees the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Top of iteration `j`, before any communication.
    IterationStart,
    /// After the product phase of iteration `j` (where failures strike).
    AfterProduct,
    /// Recovery finished; the cluster holds the state of iteration `j`.
    Recovered,
}

/// Relative residual with the `b = 0` convention: zero residual is converged.
fn relative(rr: f64, bb: f64) -> f64 {
    if bb > 0.0 {
        (rr / bb).sqrt()
    } else if rr == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Distributed convergence test `||r||_2 / ||b||_2 < rtol` using
/// fixed-order reductions.
pub fn converged(cluster: &mut Cluster, rtol: f64) -> Result<bool> {
    let rr = cluster.allreduce_with(|n| dot(&n.r, &n.r))?;
    let bb = cluster.allreduce_with(|n| {
        let b = &n.statics().rhs;
        dot(b, b)
    })?;
    Ok(relative(rr, bb) < rtol)
}

pub struct Solver {
    problem: Arc<Problem>,
    config: SolverConfig,
    mode: Mode,
}

impl Solver {
    pub fn new(problem: Arc<Problem>, config: SolverConfig) -> Result<Self> {
        let mode = config.effective_mode()?;
        Ok(Self {
            problem,
            config,
            mode,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn problem(&self) -> &Arc<Problem> {
        &self.problem
    }

    fn build_cluster(&self) -> Result<Cluster> {
        let mut cluster = if self.mode.is_resilient() {
            let cfg = ClusterConfig::new(self.problem.num_nodes(), self.config.nredu)?;
            Cluster::new(Arc::clone(&self.problem), cfg)?
        } else {
            Cluster::unprotected(Arc::clone(&self.problem))
        };
        let capacity = if self.mode == Mode::Esr { 2 } else { 3 };
        *cluster.queue_mut() = RedundantQueue::new(capacity);
        Ok(cluster)
    }

    pub fn run(&self, failure: Option<&FailureEvent>) -> Result<SolveOutcome> {
        self.run_observed(failure, |_, _, _| {})
    }

    pub fn run_observed(
        &self,
        failure: Option<&FailureEvent>,
        mut observer: impl FnMut(Phase, usize, &Cluster),
    ) -> Result<SolveOutcome> {
        let start = Instant::now();
        if let Some(ev) = failure {
            ev.validate(self.problem.num_nodes())?;
            if !ev.failed_ranks.is_empty() && !self.mode.is_resilient() {
                return Err(Error::Unrecoverable(
                    "plain PCG keeps no redundancy to recover from".into(),
                ));
            }
        }
        let mut pending = failure.filter(|ev| !ev.failed_ranks.is_empty()).cloned();
        let max_iter = self.config.max_iter.unwrap_or(10 * self.problem.n());
        let period = self.config.period.max(1);

        let mut cluster = self.build_cluster()?;
        let bb = cluster.allreduce_with(|n| {
            let b = &n.statics().rhs;
            dot(b, b)
        })?;
        let (mut rz, mut rr) = initialize(&mut cluster)?;
        let mut log = TrajectoryLog::default();
        let mut recovery = None;
        let mut j = 0usize;
        let mut performed = 0usize;
        let mut aspmv_calls = 0usize;
        let mut resuming = false;

        loop {
            let rel = relative(rr, bb);
            log.record(j, rel);
            if rel < self.config.rtol {
                break;
            }
            if j >= max_iter {
                return Err(Error::MaxIterations(max_iter));
            }
            if !(rz > 0.0) {
                return Err(Error::Breakdown {
                    iteration: j,
                    what: "r^T z",
                    value: rz,
                });
            }
            observer(Phase::IterationStart, j, &cluster);

            let mut first_stage_iteration = false;
            if resuming {
                spmv(&mut cluster)?;
                resuming = false;
            } else {
                match self.mode {
                    Mode::Plain => spmv(&mut cluster)?,
                    Mode::Imcr => {
                        if j.is_multiple_of(period) && j > 0 {
                            imcr_checkpoint(&mut cluster, j)?;
                            log.event(j, EventKind::Checkpoint);
                        }
                        spmv(&mut cluster)?;
                    }
                    Mode::Esr => {
                        aspmv(&mut cluster, j)?;
                        aspmv_calls += 1;
                        log.event(j, EventKind::Redundant);
                    }
                    Mode::Esrp => {
                        if j.is_multiple_of(period) && j > 2 {
                            aspmv(&mut cluster, j)?;
                            aspmv_calls += 1;
                            first_stage_iteration = true;
                            log.event(j, EventKind::StorageFirst);
                        } else if j > 2 && (j - 1).is_multiple_of(period) {
                            aspmv(&mut cluster, j)?;
                            aspmv_calls += 1;
                            cluster.compute(|n| {
                                let d = &mut n.duplicates;
                                d.x.clone_from(&n.x);
                                d.r.clone_from(&n.r);
                                d.z.clone_from(&n.z);
                                d.p.clone_from(&n.p);
                                d.beta_star = d.beta_star2;
                                d.stage_tag = Some(j);
                            })?;
                            log.event(j, EventKind::StorageSecond);
                        } else {
                            spmv(&mut cluster)?;
                        }
                    }
                }
            }
            observer(Phase::AfterProduct, j, &cluster);

            if pending.as_ref().is_some_and(|ev| ev.iteration == j) {
                let ev = pending.take().expect("checked above");
                log.event(j, EventKind::Failure);
                let outcome = recovery::recover(&mut cluster, self.mode, &ev, &self.config)?;
                match outcome.target {
                    Some(target) => {
                        log.event(target, EventKind::Recovery);
                        if target < j {
                            log.event(target, EventKind::Rollback);
                        }
                        j = target;
                        resuming = true;
                        rz = cluster.allreduce_with(|n| dot(&n.r, &n.z))?;
                        rr = cluster.allreduce_with(|n| dot(&n.r, &n.r))?;
                        cluster.compute(|n| n.rz = rz)?;
                    }
                    None => {
                        log.event(0, EventKind::Restart);
                        cluster.queue_mut().clear();
                        cluster.compute(|n| {
                            n.duplicates = Default::default();
                            n.checkpoint_store.clear();
                        })?;
                        (rz, rr) = initialize(&mut cluster)?;
                        j = 0;
                    }
                }
                recovery = Some(outcome.report);
                observer(Phase::Recovered, j, &cluster);
                continue;
            }

            let pq = cluster.allreduce_with(|n| dot(&n.p, &n.q))?;
            if !(pq > 0.0) {
                return Err(Error::Breakdown {
                    iteration: j,
                    what: "p^T A p",
                    value: pq,
                });
            }
            let alpha = rz / pq;
            cluster.compute(|n| {
                let statics = n.statics_handle();
                for k in 0..n.len() {
                    n.x[k] += alpha * n.p[k];
                    n.r[k] -= alpha * n.q[k];
                }
                n.z.clone_from(&n.r);
                apply_blocks(&statics.blocks, statics.range.start, &mut n.z);
                n.alpha = alpha;
            })?;
            let rz_next = cluster.allreduce_with(|n| dot(&n.r, &n.z))?;
            rr = cluster.allreduce_with(|n| dot(&n.r, &n.r))?;
            let beta = rz_next / rz;
            cluster.compute(|n| {
                for k in 0..n.len() {
                    n.p[k] = n.z[k] + beta * n.p[k];
                }
                n.beta = beta;
                n.rz = rz_next;
                if first_stage_iteration {
                    n.duplicates.beta_star2 = beta;
                }
            })?;
            rz = rz_next;
            j += 1;
            performed += 1;
        }

        Ok(SolveOutcome {
            x: cluster.assemble(|n| &n.x),
            r: cluster.assemble(|n| &n.r),
            final_iteration: j,
            iterations: performed,
            rel_residual: relative(rr, bb),
            aspmv_calls,
            counters: cluster.counters(),
            log,
            recovery,
            elapsed_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// `r0 = b - A x0`, `z0 = M r0`, `p0 = z0`. Returns `(r0^T z0, r0^T r0)`.
fn initialize(cluster: &mut Cluster) -> Result<(f64, f64)> {
    cluster.compute(|n| {
        n.x = n.statics().x0.clone();
    })?;
    let ax = product(cluster, Operand::X)?;
    let mut ax = ax.into_iter();
    cluster.compute(|n| {
        let statics = n.statics_handle();
        let ax = ax.next().expect("one product per node");
        n.r = statics.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        n.z.clone_from(&n.r);
        apply_blocks(&statics.blocks, statics.range.start, &mut n.z);
        n.p.clone_from(&n.z);
        n.q = vec![0.0; n.len()];
        n.alpha = 0.0;
        n.beta = 0.0;
    })?;
    let rz = cluster.allreduce_with(|n| dot(&n.r, &n.z))?;
    let rr = cluster.allreduce_with(|n| dot(&n.r, &n.r))?;
    cluster.compute(|n| n.rz = rz)?;
    Ok((rz, rr))
}

/// Failure-free distributed PCG.
pub fn pcg_run(problem: Arc<Problem>, config: &SolverConfig) -> Result<SolveOutcome> {
    let config = SolverConfig {
        mode: Mode::Plain,
        ..config.clone()
    };
    Solver::new(problem, config)?.run(None)
}

/// Resilient PCG (`esr`, `esrp` or `imcr`) with an optional failure event.
pub fn esrp_run(
    problem: Arc<Problem>,
    config: &SolverConfig,
    failure: Option<&FailureEvent>,
) -> Result<SolveOutcome> {
    if !config.mode.is_resilient() {
        return Err(Error::InvalidConfig(
            "resilient run requested with mode plain".into(),
        ));
    }
    Solver::new(problem, config.clone())?.run(failure)
}
