//! SpMV communication planning and the augmented SpMV (ASpMV) that leaves
//! at least `nredu` off-owner copies of every input vector entry.
//!
//! `I_{s,l}` is the sorted set of indices owned by `s` that node `l` reads to
//! compute its rows of `A p`. Their count over `l` is the multiplicity
//! `m(i)`. Each node `s` has `nredu` designated buddies `d_{s,k}` (nearest
//! neighbours, alternating right and left). Walking `k = 1..nredu`, entry `i`
//! is added to the extra set `R_{s,k}` when buddy `d_{s,k}` does not already
//! read it and the copies scheduled so far (`m(i)` plus extras for buddies
//! `1..k-1`) are still fewer than `nredu`.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, Message, NodeState, Payload, Tag};
use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::sparse::SparseMatrix;

/// Send sets `I_{s,l}` for every ordered node pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommPlan {
    send_sets: Vec<Vec<Vec<usize>>>,
}

impl CommPlan {
    pub fn num_nodes(&self) -> usize {
        self.send_sets.len()
    }

    /// `I_{s,l}`: indices owned by `s` that `l` needs for its SpMV rows.
    pub fn send_set(&self, s: usize, l: usize) -> &[usize] {
        &self.send_sets[s][l]
    }

    pub fn sends(&self, s: usize, l: usize, i: usize) -> bool {
        self.send_sets[s][l].binary_search(&i).is_ok()
    }

    /// Total number of indexed entries one SpMV moves.
    pub fn volume(&self) -> usize {
        self.send_sets.iter().flatten().map(Vec::len).sum()
    }
}

pub fn build_comm_plan(a: &SparseMatrix, part: &Partition) -> Result<CommPlan> {
    if !a.is_square() || a.nrows() != part.n() {
        return Err(Error::LengthMismatch {
            expected: part.n(),
            actual: a.nrows(),
        });
    }
    let nn = part.num_nodes();
    let mut send_sets = vec![vec![Vec::new(); nn]; nn];
    for l in 0..nn {
        for row in part.range(l) {
            for &c in a.row(row).0 {
                let s = part.owner(c);
                if s != l {
                    send_sets[s][l].push(c);
                }
            }
        }
    }
    for per_dest in &mut send_sets {
        for set in per_dest.iter_mut() {
            set.sort_unstable();
            set.dedup();
        }
    }
    Ok(CommPlan { send_sets })
}

/// Designated redundancy destination `d_{s,k}`: `s + ceil(k/2)` for odd `k`,
/// `s - k/2` for even `k`, both modulo `num_nodes`.
pub fn buddy(s: usize, k: usize, num_nodes: usize) -> Result<usize> {
    if num_nodes < 2 || k == 0 || k >= num_nodes {
        return Err(Error::InvalidConfig(format!(
            "buddy index k={k} outside 1..={} for {num_nodes} nodes",
            num_nodes.saturating_sub(1)
        )));
    }
    if s >= num_nodes {
        return Err(Error::InvalidConfig(format!(
            "rank {s} outside a {num_nodes}-node cluster"
        )));
    }
    let step = k.div_ceil(2) % num_nodes;
    Ok(if k % 2 == 1 {
        (s + step) % num_nodes
    } else {
        (s + num_nodes - step) % num_nodes
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedundancyPlan {
    nredu: usize,
    /// `buddies[s][k-1] = d_{s,k}`.
    buddies: Vec<Vec<usize>>,
    /// `extra_sets[s][k-1] = R_{s,k}`, sorted.
    extra_sets: Vec<Vec<Vec<usize>>>,
    /// `m(i)` per global index.
    multiplicity: Vec<usize>,
    /// `g(i)` per global index: buddies that already read `i` for SpMV.
    buddy_coverage: Vec<usize>,
}

impl RedundancyPlan {
    pub fn nredu(&self) -> usize {
        self.nredu
    }

    pub fn buddies(&self, s: usize) -> &[usize] {
        &self.buddies[s]
    }

    /// `R_{s,k}` for `k` in `1..=nredu`.
    pub fn extra_set(&self, s: usize, k: usize) -> &[usize] {
        &self.extra_sets[s][k - 1]
    }

    pub fn multiplicity(&self, i: usize) -> usize {
        self.multiplicity[i]
    }

    pub fn buddy_coverage(&self, i: usize) -> usize {
        self.buddy_coverage[i]
    }

    /// Number of entries shipped only for redundancy in one ASpMV.
    pub fn extra_volume(&self) -> usize {
        self.extra_sets.iter().flatten().map(Vec::len).sum()
    }

    /// Distinct non-owner nodes receiving entry `i` during one ASpMV.
    pub fn recipients(&self, comm: &CommPlan, part: &Partition, i: usize) -> Vec<usize> {
        let s = part.owner(i);
        let mut out: Vec<usize> = (0..comm.num_nodes())
            .filter(|&l| comm.sends(s, l, i))
            .collect();
        for (k, set) in self.extra_sets[s].iter().enumerate() {
            if set.binary_search(&i).is_ok() {
                out.push(self.buddies[s][k]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

pub fn compute_extra_sets(plan: &CommPlan, part: &Partition, nredu: usize) -> Result<RedundancyPlan> {
    let nn = part.num_nodes();
    if plan.num_nodes() != nn {
        return Err(Error::InvalidConfig(
            "communication plan and partition disagree on node count".into(),
        ));
    }
    if nredu == 0 || nredu >= nn {
        return Err(Error::InvalidConfig(format!(
            "nredu must be in 1..={}, got {nredu}",
            nn - 1
        )));
    }
    let buddies: Vec<Vec<usize>> = (0..nn)
        .map(|s| (1..=nredu).map(|k| buddy(s, k, nn)).collect())
        .collect::<Result<_>>()?;
    let mut multiplicity = vec![0; part.n()];
    let mut buddy_coverage = vec![0; part.n()];
    let mut extra_sets = vec![vec![Vec::new(); nredu]; nn];
    for s in 0..nn {
        for i in part.range(s) {
            let m = (0..nn).filter(|&l| plan.sends(s, l, i)).count();
            multiplicity[i] = m;
            buddy_coverage[i] = buddies[s].iter().filter(|&&d| plan.sends(s, d, i)).count();
            let mut copies = m;
            for (k, &d) in buddies[s].iter().enumerate() {
                if copies >= nredu {
                    break;
                }
                if !plan.sends(s, d, i) {
                    extra_sets[s][k].push(i);
                    copies += 1;
                }
            }
        }
    }
    Ok(RedundancyPlan {
        nredu,
        buddies,
        extra_sets,
        multiplicity,
        buddy_coverage,
    })
}

/// One redundant copy `p'^(tag)`: the entries of the search direction that
/// each node received from other owners during an ASpMV.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundantCopy {
    tag: usize,
    held: Vec<BTreeMap<usize, f64>>,
}

impl RedundantCopy {
    pub fn new(tag: usize, held: Vec<BTreeMap<usize, f64>>) -> Self {
        Self { tag, held }
    }

    pub fn tag(&self) -> usize {
        self.tag
    }

    pub fn held_by(&self, rank: usize) -> &BTreeMap<usize, f64> {
        &self.held[rank]
    }

    /// Ranks holding entry `i`, ascending.
    pub fn holders(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.held
            .iter()
            .enumerate()
            .filter(move |(_, h)| h.contains_key(&i))
            .map(|(r, _)| r)
    }
}

/// FIFO of redundant copies; pushing beyond capacity evicts the oldest.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundantQueue {
    capacity: usize,
    slots: VecDeque<RedundantCopy>,
}

impl RedundantQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            slots: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn push(&mut self, copy: RedundantCopy) {
        self.slots.push_back(copy);
        while self.slots.len() > self.capacity {
            self.slots.pop_front();
        }
    }

    /// Tags from oldest to newest.
    pub fn tags(&self) -> Vec<usize> {
        self.slots.iter().map(|c| c.tag).collect()
    }

    pub fn get(&self, tag: usize) -> Option<&RedundantCopy> {
        self.slots.iter().rev().find(|c| c.tag == tag)
    }

    /// Whether copies of both `p^(j-1)` and `p^(j)` are held.
    pub fn can_reconstruct(&self, j: usize) -> bool {
        j > 0 && self.get(j - 1).is_some() && self.get(j).is_some()
    }

    /// Latest iteration whose state the queue allows reconstructing.
    pub fn latest_recoverable(&self) -> Option<usize> {
        self.slots
            .iter()
            .map(|c| c.tag)
            .filter(|&j| self.can_reconstruct(j))
            .max()
    }

    /// Drops copies describing iterations after `tag`.
    pub fn discard_after(&mut self, tag: usize) {
        self.slots.retain(|c| c.tag <= tag);
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    pub(crate) fn forget_nodes(&mut self, ranks: &[usize]) {
        for slot in &mut self.slots {
            for &r in ranks {
                if let Some(h) = slot.held.get_mut(r) {
                    h.clear();
                }
            }
        }
    }
}

/// Which distributed vector a product reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    X,
    P,
}

fn operand(node: &NodeState, op: Operand) -> &[f64] {
    match op {
        Operand::X => &node.x,
        Operand::P => &node.p,
    }
}

fn spmv_messages(cluster: &Cluster, op: Operand) -> Vec<Message> {
    let comm = cluster.problem().comm_plan();
    let nn = cluster.num_nodes();
    cluster.collect_messages(|node| {
        let s = node.rank();
        let base = node.range().start;
        let v = operand(node, op);
        (0..nn)
            .filter(|&l| !comm.send_set(s, l).is_empty())
            .map(|l| {
                let entries = comm
                    .send_set(s, l)
                    .iter()
                    .map(|&i| (i, v[i - base]))
                    .collect();
                Message::indexed(s, l, Tag::Spmv, entries)
            })
            .collect()
    })
}

fn local_products(cluster: &mut Cluster, op: Operand, inboxes: &[Vec<Message>]) -> Result<Vec<Vec<f64>>> {
    cluster.compute(|node| {
        let statics = node.statics();
        let rows = &statics.rows;
        let mut ext = operand(node, op).to_vec();
        ext.resize(node.len() + rows.ghosts().len(), 0.0);
        for m in &inboxes[node.rank()] {
            if m.tag != Tag::Spmv {
                continue;
            }
            if let Payload::Indexed(entries) = &m.payload {
                for &(i, v) in entries {
                    let slot = rows.ghost_slot(i).expect("received entry is a ghost");
                    ext[node.len() + slot] = v;
                }
            }
        }
        rows.multiply(&ext)
    })
}

/// Distributed `A v` for the chosen operand; returns the per-node result.
pub fn product(cluster: &mut Cluster, op: Operand) -> Result<Vec<Vec<f64>>> {
    let messages = spmv_messages(cluster, op);
    let delivery = cluster.exchange(messages)?;
    local_products(cluster, op, &delivery.into_inboxes())
}

/// `q := A p` on every node, communicating only the `I_{s,l}` entries.
pub fn spmv(cluster: &mut Cluster) -> Result<()> {
    let qs = product(cluster, Operand::P)?;
    store_q(cluster, qs)
}

/// Same product as [`spmv`], bit for bit, but additionally ships the extra
/// sets `R_{s,k}` in redundant-tagged messages and pushes the received
/// entries of `p^(tag)` to the redundant queue.
pub fn aspmv(cluster: &mut Cluster, tag: usize) -> Result<()> {
    let plan = cluster
        .redundancy_plan_arc()
        .ok_or_else(|| Error::InvalidConfig("ASpMV needs a redundancy plan".into()))?;
    let mut messages = spmv_messages(cluster, Operand::P);
    messages.extend(cluster.collect_messages(|node| {
        let s = node.rank();
        let base = node.range().start;
        plan.buddies(s)
            .iter()
            .enumerate()
            .filter(|(k, _)| !plan.extra_set(s, k + 1).is_empty())
            .map(|(k, &d)| {
                let entries = plan
                    .extra_set(s, k + 1)
                    .iter()
                    .map(|&i| (i, node.p[i - base]))
                    .collect();
                Message::indexed(s, d, Tag::Redundant, entries)
            })
            .collect()
    }));
    let inboxes = cluster.exchange(messages)?.into_inboxes();
    let held = inboxes
        .iter()
        .map(|inbox| {
            let mut h = BTreeMap::new();
            for m in inbox {
                if let Payload::Indexed(entries) = &m.payload {
                    h.extend(entries.iter().copied());
                }
            }
            h
        })
        .collect();
    let qs = local_products(cluster, Operand::P, &inboxes)?;
    store_q(cluster, qs)?;
    cluster.queue_mut().push(RedundantCopy::new(tag, held));
    Ok(())
}

fn store_q(cluster: &mut Cluster, qs: Vec<Vec<f64>>) -> Result<()> {
    let mut qs = qs.into_iter();
    cluster.compute(|node| node.q = qs.next().expect("one product per node"))?;
    Ok(())
}

/// Retrieves the lost segment of `p^(tag)` for every failed rank from the
/// redundant queue. Each index is sent exactly once, by the lowest-rank
/// surviving holder, under the `gather` tag. Returns one segment per failed
/// rank in ascending rank order.
pub fn gather_lost_entries(cluster: &mut Cluster, failed: &[usize], tag: usize) -> Result<Vec<Vec<f64>>> {
    let mut failed = failed.to_vec();
    failed.sort_unstable();
    if failed.is_empty() {
        return Ok(Vec::new());
    }
    let part = cluster.problem().partition().clone();
    let copy = cluster.queue().get(tag).ok_or_else(|| {
        Error::Unrecoverable(format!("no redundant copy of p^({tag}) in the queue"))
    })?;
    let mut batches: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for &l in &failed {
        for i in part.range(l) {
            let holder = copy
                .holders(i)
                .find(|h| failed.binary_search(h).is_err())
                .ok_or(Error::MissingRedundantEntry { index: i, tag })?;
            batches
                .entry((holder, l))
                .or_default()
                .push((i, copy.held_by(holder)[&i]));
        }
    }
    let messages = batches
        .into_iter()
        .map(|((s, l), e)| Message::indexed(s, l, Tag::Gather, e))
        .collect();
    let delivery = cluster.exchange(messages)?;
    Ok(failed
        .iter()
        .map(|&l| {
            let base = part.range(l).start;
            let mut seg = vec![0.0; part.len_of(l)];
            for m in &delivery[l] {
                if let Payload::Indexed(entries) = &m.payload {
                    for &(i, v) in entries {
                        seg[i - base] = v;
                    }
                }
            }
            seg
        })
        .collect())
}
