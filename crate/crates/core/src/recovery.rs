//! Recovery after simultaneous node failures.
//!
//! * ESR: replacements rebuild `x, r, z, p` of the failure iteration from the
//!   two most recent redundant copies of `p`, the survivors' `x` and a small
//!   inner solve on the lost block of `A`.
//! * ESRP: every survivor rolls back to its node-local duplicates of the last
//!   completed storage stage, then replacements are rebuilt exactly as in ESR.
//! * IMCR: every node reloads the last in-memory checkpoint; replacements
//!   fetch theirs from a surviving buddy.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, FailureEvent, Message, Payload, Tag};
use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::pcg::{Mode, Solver, SolverConfig};
use crate::precond::unapply_blocks;
use crate::problem::Problem;
use crate::redundancy::gather_lost_entries;
use crate::sparse::{extract_submatrix, norm2, SparseMatrix};

/// In-memory checkpoint of one rank's dynamic state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: usize,
    pub owner: usize,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub beta: f64,
}

impl Checkpoint {
    fn to_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * self.x.len() + 1);
        for seg in [&self.x, &self.r, &self.z, &self.p] {
            v.extend_from_slice(seg);
        }
        v.push(self.beta);
        v
    }

    fn from_values(tag: usize, owner: usize, values: &[f64]) -> Result<Self> {
        if values.is_empty() || !(values.len() - 1).is_multiple_of(4) {
            return Err(Error::Unrecoverable(format!(
                "malformed checkpoint payload of length {}",
                values.len()
            )));
        }
        let len = (values.len() - 1) / 4;
        let seg = |k: usize| values[k * len..(k + 1) * len].to_vec();
        Ok(Self {
            tag,
            owner,
            x: seg(0),
            r: seg(1),
            z: seg(2),
            p: seg(3),
            beta: values[4 * len],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub method: Mode,
    pub failed_ranks: Vec<usize>,
    pub failure_iteration: usize,
    /// Iteration the solver resumed from (0 after a restart).
    pub rollback_target: usize,
    pub wasted_iterations: usize,
    /// True when no stored state existed and the solve restarted from `x0`.
    pub restarted: bool,
    /// Bytes moved by the recovery itself (gather plus scalar traffic).
    pub gather_bytes: u64,
    pub inner_iterations: usize,
    /// True relative residual `||w - A_ff x_f|| / ||w||` of the inner solve.
    pub inner_relative_residual: Option<f64>,
    /// Bytes moved by the inner solve among the replacement nodes.
    pub inner_bytes: u64,
    pub reconstruction_ok: bool,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolve {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub bytes: u64,
}

/// Solves `A_ff x = w` with distributed block Jacobi PCG over the replacement
/// nodes only, whose segment lengths are `lengths`.
pub fn solve_inner_system(
    a_ff: &SparseMatrix,
    w: &[f64],
    lengths: &[usize],
    rtol: f64,
    max_block: usize,
) -> Result<InnerSolve> {
    let norm_w = norm2(w);
    if norm_w == 0.0 {
        return Ok(InnerSolve {
            x: vec![0.0; w.len()],
            iterations: 0,
            relative_residual: 0.0,
            bytes: 0,
        });
    }
    let lengths: Vec<usize> = lengths.iter().copied().filter(|&l| l > 0).collect();
    let part = Partition::from_lengths(&lengths)?;
    let problem = Problem::new(a_ff.clone(), w.to_vec(), None, part, max_block)?;
    let config = SolverConfig {
        rtol,
        max_iter: Some((10 * w.len()).max(1000)),
        ..SolverConfig::plain()
    };
    let out = Solver::new(Arc::new(problem), config)?.run(None)?;
    let aw = a_ff.mul_vec(&out.x)?;
    let res: Vec<f64> = w.iter().zip(&aw).map(|(a, b)| a - b).collect();
    Ok(InnerSolve {
        relative_residual: norm2(&res) / norm_w,
        iterations: out.iterations,
        bytes: out.counters.total(),
        x: out.x,
    })
}

/// Stores `(x, r, z, p, beta)` of iteration `j` locally and at every buddy.
pub fn imcr_checkpoint(cluster: &mut Cluster, j: usize) -> Result<()> {
    let plan = cluster
        .redundancy_plan_arc()
        .ok_or_else(|| Error::InvalidConfig("checkpointing needs a redundancy plan".into()))?;
    cluster.compute(|n| {
        let cp = Checkpoint {
            tag: j,
            owner: n.rank(),
            x: n.x.clone(),
            r: n.r.clone(),
            z: n.z.clone(),
            p: n.p.clone(),
            beta: n.beta,
        };
        n.checkpoint_store.insert(n.rank(), cp);
    })?;
    let messages = cluster.collect_messages(|n| {
        let payload = n.checkpoint_store[&n.rank()].to_values();
        plan.buddies(n.rank())
            .iter()
            .map(|&d| Message::values(n.rank(), d, Tag::Checkpoint, payload.clone()))
            .collect()
    });
    let mut inboxes = cluster.exchange(messages)?.into_inboxes();
    let mut decoded: Vec<Vec<Checkpoint>> = Vec::with_capacity(inboxes.len());
    for inbox in inboxes.iter_mut() {
        let mut v = Vec::new();
        for m in inbox.drain(..) {
            if let Payload::Values(values) = &m.payload {
                v.push(Checkpoint::from_values(j, m.source, values)?);
            }
        }
        decoded.push(v);
    }
    let mut decoded = decoded.into_iter();
    cluster.compute(|n| {
        for cp in decoded.next().expect("one inbox per node") {
            n.checkpoint_store.insert(cp.owner, cp);
        }
    })?;
    Ok(())
}

fn survivors(cluster: &Cluster, failed: &[usize]) -> Vec<usize> {
    (0..cluster.num_nodes())
        .filter(|r| failed.binary_search(r).is_err())
        .collect()
}

/// Reloads the last checkpoint everywhere. `None` when no checkpoint was
/// taken yet (the caller restarts from `x0`).
pub fn imcr_restore(cluster: &mut Cluster, failed: &[usize]) -> Result<Option<usize>> {
    let alive = survivors(cluster, failed);
    let tags: Vec<Option<usize>> = alive
        .iter()
        .map(|&s| cluster.node(s).checkpoint_store.get(&s).map(|c| c.tag))
        .collect();
    let Some(Some(target)) = tags.first().copied() else {
        return Ok(None);
    };
    if tags.iter().any(|&t| t != Some(target)) {
        return Err(Error::Unrecoverable("survivors disagree on checkpoint tag".into()));
    }
    let mut messages = Vec::new();
    for &l in failed {
        let holder = alive
            .iter()
            .copied()
            .find(|&s| {
                cluster
                    .node(s)
                    .checkpoint_store
                    .get(&l)
                    .is_some_and(|c| c.tag == target)
            })
            .ok_or_else(|| {
                Error::Unrecoverable(format!("every holder of rank {l}'s checkpoint failed"))
            })?;
        let payload = cluster.node(holder).checkpoint_store[&l].to_values();
        messages.push(Message::values(holder, l, Tag::Gather, payload));
    }
    let delivery = cluster.exchange(messages)?;
    for &l in failed {
        let m = &delivery[l][0];
        let Payload::Values(values) = &m.payload else {
            unreachable!("checkpoints travel as values")
        };
        let cp = Checkpoint::from_values(target, l, values)?;
        let node = cluster.node_mut(l);
        node.checkpoint_store.insert(l, cp);
    }
    cluster.compute(|n| {
        let cp = n.checkpoint_store[&n.rank()].clone();
        n.x = cp.x;
        n.r = cp.r;
        n.z = cp.z;
        n.p = cp.p;
        n.beta = cp.beta;
    })?;
    Ok(Some(target))
}

/// Rolls every survivor back to its stage duplicates. `None` before the
/// first storage stage has completed.
pub fn esrp_rollback(cluster: &mut Cluster, failed: &[usize]) -> Result<Option<usize>> {
    let alive = survivors(cluster, failed);
    let tags: Vec<Option<usize>> = alive
        .iter()
        .map(|&s| cluster.node(s).duplicates.stage_tag)
        .collect();
    let Some(Some(target)) = tags.first().copied() else {
        return Ok(None);
    };
    if tags.iter().any(|&t| t != Some(target)) {
        return Err(Error::Unrecoverable("survivors disagree on stage tag".into()));
    }
    if !cluster.queue().can_reconstruct(target) {
        return Ok(None);
    }
    for s in alive {
        let node = cluster.node_mut(s);
        let d = &node.duplicates;
        node.x = d.x.clone();
        node.r = d.r.clone();
        node.z = d.z.clone();
        node.p = d.p.clone();
        node.beta = d.beta_star;
    }
    Ok(Some(target))
}

/// Rebuilds `x, r, z, p` and beta of iteration `target` on the replacement
/// nodes, assuming survivors already hold that iteration's state and the
/// queue holds `p^(target-1)` and `p^(target)`.
pub fn esr_reconstruct(
    cluster: &mut Cluster,
    failed: &[usize],
    target: usize,
    config: &SolverConfig,
) -> Result<InnerSolve> {
    let mut failed = failed.to_vec();
    failed.sort_unstable();
    if failed.is_empty() {
        return Ok(InnerSolve {
            x: Vec::new(),
            iterations: 0,
            relative_residual: 0.0,
            bytes: 0,
        });
    }
    if target == 0 {
        return Err(Error::Unrecoverable("iteration 0 has no previous search direction".into()));
    }
    let alive = survivors(cluster, &failed);
    let root = *alive
        .first()
        .ok_or_else(|| Error::Unrecoverable("no surviving node".into()))?;
    let part = cluster.problem().partition().clone();
    let is_lost = |i: usize| failed.binary_search(&part.owner(i)).is_ok();

    // Surviving x entries coupled to lost rows, plus beta from the root.
    let mut messages = Vec::new();
    {
        let comm = cluster.problem().comm_plan();
        for &s in &alive {
            let node = cluster.node(s);
            let base = node.range().start;
            for &l in &failed {
                let set = comm.send_set(s, l);
                if !set.is_empty() {
                    let entries = set.iter().map(|&i| (i, node.x[i - base])).collect();
                    messages.push(Message::indexed(s, l, Tag::Gather, entries));
                }
            }
        }
        for &l in &failed {
            messages.push(Message::values(root, l, Tag::Scalar, vec![cluster.node(root).beta]));
        }
    }
    let delivery = cluster.exchange(messages)?;
    let p_prev = gather_lost_entries(cluster, &failed, target - 1)?;
    let p_cur = gather_lost_entries(cluster, &failed, target)?;

    let mut w_all = Vec::new();
    let mut betas = Vec::with_capacity(failed.len());
    for (k, &l) in failed.iter().enumerate() {
        let mut x_other = BTreeMap::new();
        let mut beta = None;
        for m in &delivery[l] {
            match &m.payload {
                Payload::Indexed(e) => x_other.extend(e.iter().copied()),
                Payload::Values(v) => beta = v.first().copied(),
            }
        }
        let beta = beta.expect("beta sent to every replacement");
        let node = cluster.node_mut(l);
        let statics = node.statics_handle();
        let base = statics.range.start;
        let z: Vec<f64> = p_cur[k].iter().zip(&p_prev[k]).map(|(p, q)| p - beta * q).collect();
        let r = unapply_blocks(&statics.blocks, base, &z);
        for li in 0..statics.range.len() {
            let (cols, vals) = statics.rows.row_global(li);
            let coupling: f64 = cols
                .iter()
                .zip(vals)
                .filter(|(&c, _)| !is_lost(c))
                .map(|(c, v)| v * x_other[c])
                .sum();
            w_all.push(statics.rhs[li] - r[li] - coupling);
        }
        node.z = z;
        node.r = r;
        node.p = p_cur[k].clone();
        node.beta = beta;
        betas.push(beta);
    }

    let lost = part.indices_of(&failed);
    let a_ff = extract_submatrix(cluster.problem().matrix(), &lost, &lost)?;
    let lengths: Vec<usize> = failed.iter().map(|&l| part.len_of(l)).collect();
    let inner = solve_inner_system(&a_ff, &w_all, &lengths, config.inner_rtol, config.inner_max_block)?;
    let mut offset = 0;
    for &l in &failed {
        let len = part.len_of(l);
        cluster.node_mut(l).x = inner.x[offset..offset + len].to_vec();
        offset += len;
    }
    Ok(inner)
}

pub(crate) struct RecoveryOutcome {
    /// Iteration to resume from; `None` means restart from `x0`.
    pub target: Option<usize>,
    pub report: RecoveryReport,
}

pub(crate) fn recover(
    cluster: &mut Cluster,
    mode: Mode,
    event: &FailureEvent,
    config: &SolverConfig,
) -> Result<RecoveryOutcome> {
    let start = Instant::now();
    let before = cluster.counters();
    let failed = event.failed_ranks.clone();
    let j_f = event.iteration;
    cluster.inject_failure(event)?;
    cluster.promote_replacements(event);

    let mut inner = None;
    let target = match mode {
        Mode::Plain => {
            return Err(Error::Unrecoverable("plain PCG keeps no redundancy".into()))
        }
        Mode::Esr => {
            if j_f > 0 && cluster.queue().can_reconstruct(j_f) {
                inner = Some(esr_reconstruct(cluster, &failed, j_f, config)?);
                Some(j_f)
            } else {
                None
            }
        }
        Mode::Esrp => match esrp_rollback(cluster, &failed)? {
            Some(t) => {
                inner = Some(esr_reconstruct(cluster, &failed, t, config)?);
                for &l in &failed {
                    let node = cluster.node_mut(l);
                    node.duplicates.x = node.x.clone();
                    node.duplicates.r = node.r.clone();
                    node.duplicates.z = node.z.clone();
                    node.duplicates.p = node.p.clone();
                    node.duplicates.beta_star = node.beta;
                    node.duplicates.stage_tag = Some(t);
                }
                Some(t)
            }
            None => None,
        },
        Mode::Imcr => imcr_restore(cluster, &failed)?,
    };
    if let Some(t) = target {
        cluster.queue_mut().discard_after(t);
    }
    let spent = cluster.counters().since(&before);
    let rollback_target = target.unwrap_or(0);
    let report = RecoveryReport {
        method: mode,
        failed_ranks: failed,
        failure_iteration: j_f,
        rollback_target,
        wasted_iterations: j_f - rollback_target,
        restarted: target.is_none(),
        gather_bytes: spent.total(),
        inner_iterations: inner.as_ref().map_or(0, |i| i.iterations),
        inner_relative_residual: inner.as_ref().map(|i| i.relative_residual),
        inner_bytes: inner.as_ref().map_or(0, |i| i.bytes),
        reconstruction_ok: inner
            .as_ref()
            .is_none_or(|i| i.relative_residual < config.inner_rtol),
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RecoveryOutcome { target, report })
}
