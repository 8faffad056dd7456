//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use esrp_core::cluster::NodeState;
use esrp_core::pcg::EventKind;
use esrp_core::redundancy::aspmv;
use esrp_core::{
    buddy, generate_poisson2d, make_block_row_partition, random_banded_spd, Cluster,
    ClusterConfig, FailureEvent, Mode, Phase, Problem, SolveOutcome, Solver, SolverConfig,
    SparseMatrix, TrajectoryLog,
};
use esrp_harness::{
    residual_drift, run_experiment, worst_case_failure_iteration, ExperimentSpec, Location,
    MatrixSource, Scenario,
};

/// Iteration-count slack for reconstructions perturbed by rounding.
const ITER_TOL: usize = 2;
const RTOL: f64 = 1e-8;
const TRAJECTORY_TOL: f64 = 1e-6;
const TRAJECTORY_LEN: usize = 20;
const INNER_TOL: f64 = 1e-14;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn poisson(side: usize, nodes: usize) -> Arc<Problem> {
    let a = generate_poisson2d(side).unwrap();
    let n = a.n();
    let b: Vec<f64> = (0..n).map(|i| (((i * 7919) % 1009) as f64 / 504.5) - 1.0).collect();
    let part = make_block_row_partition(n, nodes).unwrap();
    Arc::new(Problem::new(a, b, None, part, 10).unwrap())
}

fn true_rel_residual(p: &Problem, x: &[f64]) -> f64 {
    let ax = p.matrix().mul_vec(x).unwrap();
    let b = p.rhs();
    let res: f64 = b.iter().zip(&ax).map(|(b, a)| (b - a).powi(2)).sum::<f64>().sqrt();
    res / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest relative gap between the post-recovery residuals and the
/// failure-free residuals at the same iterations, over `len` iterations.
fn trajectory_gap(reference: &TrajectoryLog, failed: &TrajectoryLog, len: usize) -> f64 {
    let step = failed
        .events
        .iter()
        .find(|e| e.kind == EventKind::Recovery || e.kind == EventKind::Restart)
        .map(|e| e.step)
        .expect("recovery logged");
    failed
        .residuals_after(step)
        .iter()
        .take(len)
        .filter_map(|e| reference.residual_at(e.iteration).map(|r| (e.rel_residual, r)))
        .map(|(got, want)| (got - want).abs() / want.abs())
        .fold(0.0, f64::max)
}

/// Checks shared by every recovered run: convergence, iteration accounting,
/// trajectory and inner solve accuracy.
fn check_recovered(
    problem: &Problem,
    reference: &SolveOutcome,
    out: &SolveOutcome,
) -> Result<String, String> {
    let c = reference.final_iteration;
    let rep = out.recovery.as_ref().ok_or("no recovery report")?;
    let true_res = true_rel_residual(problem, &out.x);
    let gap = trajectory_gap(&reference.log, &out.log, TRAJECTORY_LEN);
    let inner = rep.inner_relative_residual.unwrap_or(0.0);
    let mut errs = Vec::new();
    if out.final_iteration.abs_diff(c) > ITER_TOL {
        errs.push(format!("final j {} vs C {c}", out.final_iteration));
    }
    if out.iterations.abs_diff(c + rep.wasted_iterations) > ITER_TOL {
        errs.push(format!(
            "performed {} vs C + wasted {}",
            out.iterations,
            c + rep.wasted_iterations
        ));
    }
    if !(out.rel_residual < RTOL && true_res < RTOL) {
        errs.push(format!("residual {:.2e} / true {true_res:.2e}", out.rel_residual));
    }
    if gap > TRAJECTORY_TOL {
        errs.push(format!("trajectory gap {gap:.2e}"));
    }
    if !(inner < INNER_TOL) {
        errs.push(format!("inner residual {inner:.2e}"));
    }
    if errs.is_empty() {
        Ok(format!(
            "j_f={} j*={} performed={} gap={gap:.1e} inner={inner:.1e}",
            rep.failure_iteration, rep.rollback_target, out.iterations
        ))
    } else {
        Err(errs.join("; "))
    }
}

fn criterion_1() -> Verdict {
    let mut worst_case_secs: f64 = 0.0;
    let mut failures = Vec::new();
    let mut cases = 0;
    for side in [16, 32, 64] {
        for nodes in [4, 8, 16] {
            let start = Instant::now();
            let problem = poisson(side, nodes);
            let plain = Solver::new(Arc::clone(&problem), SolverConfig::plain())
                .unwrap()
                .run(None)
                .unwrap();
            let mut configs = vec![SolverConfig::esr(1)];
            configs.extend([5, 20, 50].map(|t| SolverConfig::esrp(t, 1)));
            for cfg in configs {
                let label = format!("side {side} N {nodes} {} T {}", cfg.mode, cfg.period);
                match Solver::new(Arc::clone(&problem), cfg).and_then(|s| s.run(None)) {
                    Ok(out) => {
                        if out.x != plain.x || out.final_iteration != plain.final_iteration {
                            failures.push(label);
                        }
                    }
                    Err(e) => failures.push(format!("{label}: {e}")),
                }
            }
            cases += 1;
            worst_case_secs = worst_case_secs.max(start.elapsed().as_secs_f64());
        }
    }
    if worst_case_secs >= 10.0 {
        failures.push(format!("slowest case {worst_case_secs:.1}s"));
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{cases} cases bitwise identical, slowest {worst_case_secs:.2}s")
        } else {
            failures.join(", ")
        },
    )
}

fn criterion_2() -> Verdict {
    let problem = poisson(32, 8);
    let solver = Solver::new(Arc::clone(&problem), SolverConfig::esr(1)).unwrap();
    let reference = solver.run(None).unwrap();
    let c = reference.final_iteration;
    let j_f = worst_case_failure_iteration(c, 1).unwrap();
    let out = match solver.run(Some(&FailureEvent::new(j_f, vec![4]))) {
        Ok(out) => out,
        Err(e) => return verdict(false, e.to_string()),
    };
    match check_recovered(&problem, &reference, &out) {
        Ok(d) => verdict(true, format!("C={c} final j={} {d}", out.final_iteration)),
        Err(e) => verdict(false, e),
    }
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let problem = poisson(32, 8);
    let mut ok = 0;
    let mut failures = Vec::new();
    let mut worst_inner: f64 = 0.0;
    for nredu in [1, 3] {
        for cfg in [SolverConfig::esr(nredu), SolverConfig::esrp(20, nredu)] {
            let solver = Solver::new(Arc::clone(&problem), cfg.clone()).unwrap();
            let reference = solver.run(None).unwrap();
            let period = if cfg.mode == Mode::Esr { 1 } else { cfg.period };
            let j_f = worst_case_failure_iteration(reference.final_iteration, period).unwrap();
            for first in 0..8 {
                let ev = FailureEvent::contiguous(j_f, first, nredu, 8);
                let label = format!("{} nredu {nredu} ranks {:?}", cfg.mode, ev.failed_ranks);
                match solver.run(Some(&ev)) {
                    Ok(out) => match check_recovered(&problem, &reference, &out) {
                        Ok(_) => {
                            ok += 1;
                            let inner = out.recovery.unwrap().inner_relative_residual.unwrap_or(0.0);
                            worst_inner = worst_inner.max(inner);
                        }
                        Err(e) => failures.push(format!("{label}: {e}")),
                    },
                    Err(e) => failures.push(format!("{label}: {e}")),
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        failures.push(format!("took {secs:.0}s"));
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{ok} failure scenarios recovered, max inner residual {worst_inner:.1e}, {secs:.1}s")
        } else {
            failures.join(" | ")
        },
    )
}

fn criterion_4() -> Verdict {
    let t = 20;
    let problem = poisson(32, 8);
    let solver = Solver::new(Arc::clone(&problem), SolverConfig::esrp(t, 1)).unwrap();
    let reference = solver.run(None).unwrap();
    let c = reference.final_iteration;
    let j_f = match worst_case_failure_iteration(c, t) {
        Ok(j) => j,
        Err(e) => return verdict(false, e.to_string()),
    };
    let out = match solver.run(Some(&FailureEvent::contiguous(j_f, 4, 1, 8))) {
        Ok(out) => out,
        Err(e) => return verdict(false, e.to_string()),
    };
    let rep = out.recovery.as_ref().unwrap();
    let wasted = rep.wasted_iterations;
    let pass = wasted.abs_diff(t - 2) <= 1 && out.iterations.abs_diff(c + wasted) <= ITER_TOL;
    verdict(
        pass,
        format!(
            "C={c} j_f={j_f} j*={} wasted={wasted} (T-2={}) performed={} (C+wasted={})",
            rep.rollback_target,
            t - 2,
            out.iterations,
            c + wasted
        ),
    )
}

fn criterion_5() -> Verdict {
    let t = 5;
    let problem = poisson(16, 8);
    let solver = Solver::new(problem, SolverConfig::esrp(t, 1)).unwrap();
    // Iteration 2T runs the first ASpMV of the second storage stage.
    let mut queue_tags = Vec::new();
    let out = solver.run_observed(Some(&FailureEvent::new(2 * t, vec![3])), |phase, j, c| {
        if phase == Phase::AfterProduct && j == 2 * t && queue_tags.is_empty() {
            queue_tags = c.queue().tags();
        }
    });
    match out {
        Ok(out) => {
            let target = out.recovery.unwrap().rollback_target;
            verdict(
                target == t + 1 && queue_tags == vec![t, t + 1, 2 * t],
                format!("queue at failure {queue_tags:?}, recovered to {target} (T+1={})", t + 1),
            )
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

/// Every index of `p` owned by some other rank is needed by at least one
/// other rank for the plain product.
fn column_condition(problem: &Problem) -> bool {
    let part = problem.partition();
    let comm = problem.comm_plan();
    (0..problem.n()).all(|i| {
        let s = part.owner(i);
        (0..part.num_nodes()).any(|l| l != s && comm.sends(s, l, i))
    })
}

fn criterion_6() -> Verdict {
    let mut matrices: Vec<(String, SparseMatrix)> = Vec::new();
    for n in [40, 97, 200] {
        for bandwidth in [1, 3, 6] {
            for seed in 0..3 {
                let density = [0.3, 0.7, 1.0][seed as usize];
                matrices.push((
                    format!("banded n{n} bw{bandwidth} s{seed}"),
                    random_banded_spd(n, bandwidth, density, seed).unwrap(),
                ));
            }
        }
    }
    let mut checked = 0;
    let mut condition_cases = 0;
    let mut failures = Vec::new();
    for (label, a) in &matrices {
        let n = a.n();
        for nodes in [2, 5, 8, 16] {
            let part = make_block_row_partition(n, nodes).unwrap();
            let problem = Arc::new(Problem::new(a.clone(), vec![1.0; n], None, part.clone(), 10).unwrap());
            let condition = column_condition(&problem);
            for nredu in (1..=3).filter(|&r| r < nodes) {
                let mut cluster =
                    Cluster::new(Arc::clone(&problem), ClusterConfig::new(nodes, nredu).unwrap()).unwrap();
                for rank in 0..nodes {
                    cluster.node_mut(rank).p = part.range(rank).map(|i| i as f64 + 0.5).collect();
                }
                aspmv(&mut cluster, 0).unwrap();
                let copy = cluster.queue().get(0).unwrap();
                for i in 0..n {
                    let holders: BTreeSet<usize> = copy.holders(i).collect();
                    let owner = part.owner(i);
                    if holders.contains(&owner)
                        || holders.len() < nredu
                        || holders.iter().any(|&h| copy.held_by(h)[&i] != i as f64 + 0.5)
                    {
                        failures.push(format!("{label} N{nodes} nredu{nredu} index {i}"));
                        break;
                    }
                }
                if condition && nredu == 1 {
                    condition_cases += 1;
                    let plan = cluster.redundancy_plan().unwrap();
                    if (0..nodes).any(|s| !plan.extra_set(s, 1).is_empty()) {
                        failures.push(format!("{label} N{nodes}: column condition but extras sent"));
                    }
                }
                checked += 1;
            }
        }
    }
    if condition_cases == 0 {
        failures.push("no matrix satisfied the column condition".into());
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{checked} configurations covered, {condition_cases} column-condition cases with no extras")
        } else {
            failures.join(", ")
        },
    )
}

fn criterion_7() -> Verdict {
    let mut checked = 0;
    for n in 2..=32usize {
        for s in 0..n {
            let mut seen = BTreeSet::new();
            for k in 1..n {
                let expect = if k % 2 == 1 {
                    (s + k.div_ceil(2)) % n
                } else {
                    (s as i64 - (k / 2) as i64).rem_euclid(n as i64) as usize
                };
                let got = buddy(s, k, n).unwrap();
                if got != expect || got == s || !seen.insert(got) {
                    return verdict(false, format!("buddy({s},{k},{n}) = {got}, expected {expect}"));
                }
                checked += 1;
            }
        }
    }
    verdict(true, format!("{checked} (s, k, N) triples match, all distinct"))
}

type Snapshot = Vec<[Vec<f64>; 4]>;

fn snapshot(c: &Cluster) -> Snapshot {
    c.nodes()
        .iter()
        .map(|n: &NodeState| [n.x.clone(), n.r.clone(), n.z.clone(), n.p.clone()])
        .collect()
}

fn criterion_8() -> Verdict {
    let t = 20;
    let problem = poisson(32, 8);
    let solver = Solver::new(Arc::clone(&problem), SolverConfig::imcr(t, 1)).unwrap();
    let reference = solver.run(None).unwrap();
    let c = reference.final_iteration;
    let j_f = worst_case_failure_iteration(c, t).unwrap();
    let j_star = j_f / t * t;
    let mut before = None;
    solver
        .run_observed(None, |phase, j, cl| {
            if phase == Phase::IterationStart && j == j_star && before.is_none() {
                before = Some(snapshot(cl));
            }
        })
        .unwrap();
    let mut after = None;
    let out = solver.run_observed(Some(&FailureEvent::new(j_f, vec![4])), |phase, _, cl| {
        if phase == Phase::Recovered {
            after = Some(snapshot(cl));
        }
    });
    let out = match out {
        Ok(out) => out,
        Err(e) => return verdict(false, e.to_string()),
    };
    let rep = out.recovery.as_ref().unwrap();
    let bitwise = before.is_some() && before == after;
    let pass = bitwise
        && rep.rollback_target == j_star
        && out.iterations == c + (j_f - j_star)
        && out.final_iteration == c
        && out.x == reference.x;
    verdict(
        pass,
        format!(
            "restored state bitwise={bitwise}, C={c} j_f={j_f} j*={} performed={} (C+{})",
            rep.rollback_target,
            out.iterations,
            j_f - j_star
        ),
    )
}

fn criterion_9() -> Verdict {
    // Failure-free: plain and ESRP must report the same drift.
    let problem = poisson(32, 8);
    let plain = Solver::new(Arc::clone(&problem), SolverConfig::plain()).unwrap().run(None).unwrap();
    let esrp = Solver::new(Arc::clone(&problem), SolverConfig::esrp(20, 1)).unwrap().run(None).unwrap();
    let drift = |o: &SolveOutcome| {
        residual_drift(problem.matrix(), problem.rhs(), &o.x, &o.r).unwrap().value
    };
    let (d_plain, d_esrp) = (drift(&plain), drift(&esrp));
    let mut failures = Vec::new();
    if d_plain.to_bits() != d_esrp.to_bits() {
        failures.push(format!("failure-free drift {d_plain:e} vs {d_esrp:e}"));
    }

    // With failures: drift stays within an order of magnitude of the reference.
    let mut worst_ratio: f64 = 0.0;
    for (mode, period, nredu, failures_n, location) in [
        (Mode::Esrp, 20, 1, 1, Location::Start),
        (Mode::Esrp, 20, 1, 1, Location::Center),
        (Mode::Esrp, 20, 3, 3, Location::Center),
        (Mode::Esr, 1, 1, 1, Location::Center),
        (Mode::Imcr, 20, 1, 1, Location::Center),
    ] {
        let spec = ExperimentSpec {
            matrix: MatrixSource::Poisson2d { side: 32 },
            nodes: 8,
            mode,
            period,
            nredu,
            failures: failures_n,
            location,
            reps: 1,
            seed: 3,
            ..ExperimentSpec::default()
        };
        let report = run_experiment(&spec).unwrap();
        let get = |s: Scenario| {
            report
                .runs
                .iter()
                .find(|r| r.scenario == s)
                .and_then(|r| r.residual_drift)
        };
        match (get(Scenario::Reference), get(Scenario::Failure)) {
            (Some(d_ref), Some(d_fail)) => {
                let ratio = (d_fail - d_ref).abs() / d_ref.abs();
                worst_ratio = worst_ratio.max(ratio);
                if !(ratio <= 10.0) {
                    failures.push(format!(
                        "{mode} nredu {nredu} {}: drift {d_fail:.2e} vs reference {d_ref:.2e}",
                        location.label()
                    ));
                }
            }
            _ => failures.push(format!("{mode} nredu {nredu}: run failed")),
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "failure-free drift {d_plain:.3e} identical; worst |d_f - d_ref|/|d_ref| = {worst_ratio:.2}"
            )
        } else {
            failures.join(", ")
        },
    )
}

fn criterion_10() -> Verdict {
    let problem = poisson(32, 8);
    let c = Solver::new(Arc::clone(&problem), SolverConfig::plain())
        .unwrap()
        .run(None)
        .unwrap()
        .final_iteration;
    let bytes: Vec<u64> = [5, 20, 50]
        .iter()
        .map(|&t| {
            Solver::new(Arc::clone(&problem), SolverConfig::esrp(t, 1))
                .unwrap()
                .run(None)
                .unwrap()
                .counters
                .redundant
        })
        .collect();
    let pass = bytes.windows(2).all(|w| w[0] > w[1]) && c > 51;
    verdict(pass, format!("C={c}, redundant bytes for T=5,20,50: {bytes:?}"))
}

fn main() -> ExitCode {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check); 10] = [
        ("failure-free equivalence", criterion_1),
        ("ESR exact recovery", criterion_2),
        ("multi-failure ESR/ESRP sweep", criterion_3),
        ("ESRP rollback accounting", criterion_4),
        ("queue semantics", criterion_5),
        ("redundancy coverage", criterion_6),
        ("buddy mapping", criterion_7),
        ("IMCR exactness", criterion_8),
        ("residual drift", criterion_9),
        ("overhead monotonicity", criterion_10),
    ];
    let mut failed = 0;
    for (idx, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        println!(
            "criterion {:>2} {:<30} {}  {}",
            idx + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
