//! Deterministic simulated message-passing cluster.
//!
//! Every node owns its dynamic solver state in isolation. Data moves between
//! nodes only through [`Cluster::exchange`] and [`Cluster::allreduce_sum`],
//! which account transferred bytes per [`Tag`]. Failure injection wipes the
//! dynamic state of the failed ranks; promotion revives them as replacement
//! nodes with freshly attached static data.

use std::collections::BTreeMap;
use std::ops::{Index, Range};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Problem, StaticData};
use crate::recovery::Checkpoint;
use crate::redundancy::{compute_extra_sets, RedundancyPlan, RedundantQueue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub num_nodes: usize,
    pub redundancy_degree: usize,
}

impl ClusterConfig {
    pub fn new(num_nodes: usize, redundancy_degree: usize) -> Result<Self> {
        if num_nodes < 2 {
            return Err(Error::InvalidConfig(format!(
                "a resilient cluster needs at least 2 nodes, got {num_nodes}"
            )));
        }
        if redundancy_degree == 0 || redundancy_degree >= num_nodes {
            return Err(Error::InvalidConfig(format!(
                "redundancy degree must be in 1..={}, got {redundancy_degree}",
                num_nodes - 1
            )));
        }
        Ok(Self {
            num_nodes,
            redundancy_degree,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Spmv,
    Redundant,
    Gather,
    Checkpoint,
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// `(global index, value)` pairs, 16 bytes each.
    Indexed(Vec<(usize, f64)>),
    /// Bare values, 8 bytes each.
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub source: usize,
    pub dest: usize,
    pub tag: Tag,
    pub payload: Payload,
}

impl Message {
    pub fn indexed(source: usize, dest: usize, tag: Tag, entries: Vec<(usize, f64)>) -> Self {
        Self {
            source,
            dest,
            tag,
            payload: Payload::Indexed(entries),
        }
    }

    pub fn values(source: usize, dest: usize, tag: Tag, values: Vec<f64>) -> Self {
        Self {
            source,
            dest,
            tag,
            payload: Payload::Values(values),
        }
    }

    pub fn byte_size(&self) -> u64 {
        match &self.payload {
            Payload::Indexed(e) => 16 * e.len() as u64,
            Payload::Values(v) => 8 * v.len() as u64,
        }
    }

    fn ordering(&self, other: &Self) -> std::cmp::Ordering {
        (self.source, self.dest, self.tag)
            .cmp(&(other.source, other.dest, other.tag))
            .then_with(|| match (&self.payload, &other.payload) {
                (Payload::Indexed(a), Payload::Indexed(b)) => a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)))
                    .find(|o| o.is_ne())
                    .unwrap_or(a.len().cmp(&b.len())),
                (Payload::Values(a), Payload::Values(b)) => a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(a.len().cmp(&b.len())),
                (Payload::Indexed(_), Payload::Values(_)) => std::cmp::Ordering::Less,
                (Payload::Values(_), Payload::Indexed(_)) => std::cmp::Ordering::Greater,
            })
    }
}

/// Cumulative transferred bytes per message tag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCounters {
    pub spmv: u64,
    pub redundant: u64,
    pub gather: u64,
    pub checkpoint: u64,
    pub scalar: u64,
}

impl ByteCounters {
    pub fn add(&mut self, tag: Tag, bytes: u64) {
        *self.slot(tag) += bytes;
    }

    pub fn get(&self, tag: Tag) -> u64 {
        match tag {
            Tag::Spmv => self.spmv,
            Tag::Redundant => self.redundant,
            Tag::Gather => self.gather,
            Tag::Checkpoint => self.checkpoint,
            Tag::Scalar => self.scalar,
        }
    }

    pub fn total(&self) -> u64 {
        self.spmv + self.redundant + self.gather + self.checkpoint + self.scalar
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &ByteCounters) -> ByteCounters {
        ByteCounters {
            spmv: self.spmv - earlier.spmv,
            redundant: self.redundant - earlier.redundant,
            gather: self.gather - earlier.gather,
            checkpoint: self.checkpoint - earlier.checkpoint,
            scalar: self.scalar - earlier.scalar,
        }
    }

    fn slot(&mut self, tag: Tag) -> &mut u64 {
        match tag {
            Tag::Spmv => &mut self.spmv,
            Tag::Redundant => &mut self.redundant,
            Tag::Gather => &mut self.gather,
            Tag::Checkpoint => &mut self.checkpoint,
            Tag::Scalar => &mut self.scalar,
        }
    }
}

/// Node-local duplicates refreshed during an ESRP storage stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DuplicateSet {
    /// beta*: `beta^(j*-1)` for the completed stage.
    pub beta_star: f64,
    /// beta**: beta of the first stage iteration, promoted to beta* one
    /// iteration later.
    pub beta_star2: f64,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    /// Iteration `j*` the vector duplicates describe, once a stage completed.
    pub stage_tag: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    rank: usize,
    range: Range<usize>,
    alive: bool,
    statics: Option<Arc<StaticData>>,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Cached `r^T z` of the current iterate.
    pub rz: f64,
    pub duplicates: DuplicateSet,
    /// Checkpoints held by this node keyed by owner rank (own copy included).
    pub checkpoint_store: BTreeMap<usize, Checkpoint>,
}

impl NodeState {
    fn new(rank: usize, statics: Arc<StaticData>) -> Self {
        let len = statics.range.len();
        Self {
            rank,
            range: statics.range.clone(),
            alive: true,
            statics: Some(statics),
            x: vec![0.0; len],
            r: vec![0.0; len],
            z: vec![0.0; len],
            p: vec![0.0; len],
            q: vec![0.0; len],
            alpha: 0.0,
            beta: 0.0,
            rz: 0.0,
            duplicates: DuplicateSet::default(),
            checkpoint_store: BTreeMap::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    /// Static rows, right-hand side and preconditioner blocks of this rank.
    /// Panics while the node is failed and not yet promoted.
    pub fn statics(&self) -> &StaticData {
        self.statics
            .as_deref()
            .expect("static data detached from failed node")
    }

    /// Shared handle to the static data, for closures that also mutate the node.
    pub fn statics_handle(&self) -> Arc<StaticData> {
        Arc::clone(
            self.statics
                .as_ref()
                .expect("static data detached from failed node"),
        )
    }

    pub fn has_statics(&self) -> bool {
        self.statics.is_some()
    }

    fn wipe(&mut self) {
        let len = self.len();
        for v in [&mut self.x, &mut self.r, &mut self.z, &mut self.p, &mut self.q] {
            *v = vec![0.0; len];
        }
        self.alpha = 0.0;
        self.beta = 0.0;
        self.rz = 0.0;
        self.duplicates = DuplicateSet::default();
        self.checkpoint_store.clear();
        self.statics = None;
        self.alive = false;
    }
}

/// Simultaneous failure of a set of ranks at an iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub iteration: usize,
    pub failed_ranks: Vec<usize>,
}

impl FailureEvent {
    pub fn new(iteration: usize, mut failed_ranks: Vec<usize>) -> Self {
        failed_ranks.sort_unstable();
        Self {
            iteration,
            failed_ranks,
        }
    }

    /// Contiguous block of `count` ranks starting at `first`, wrapping mod `num_nodes`.
    pub fn contiguous(iteration: usize, first: usize, count: usize, num_nodes: usize) -> Self {
        Self::new(
            iteration,
            (0..count).map(|k| (first + k) % num_nodes).collect(),
        )
    }

    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if let Some(&bad) = self.failed_ranks.iter().find(|&&r| r >= num_nodes) {
            return Err(Error::InvalidConfig(format!(
                "failed rank {bad} does not exist in a {num_nodes}-node cluster"
            )));
        }
        let mut sorted = self.failed_ranks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.failed_ranks.len() {
            return Err(Error::InvalidConfig("failed ranks are not distinct".into()));
        }
        if sorted.len() == num_nodes {
            return Err(Error::InvalidConfig("every node failed".into()));
        }
        Ok(())
    }
}

/// Per-node inboxes produced by one exchange, ordered by (source, tag).
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    inboxes: Vec<Vec<Message>>,
}

impl Delivery {
    pub fn inbox(&self, rank: usize) -> &[Message] {
        &self.inboxes[rank]
    }

    pub fn is_empty(&self) -> bool {
        self.inboxes.iter().all(Vec::is_empty)
    }

    pub fn into_inboxes(self) -> Vec<Vec<Message>> {
        self.inboxes
    }
}

impl Index<usize> for Delivery {
    type Output = [Message];

    fn index(&self, rank: usize) -> &[Message] {
        &self.inboxes[rank]
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    problem: Arc<Problem>,
    redundancy_degree: usize,
    redundancy: Option<Arc<RedundancyPlan>>,
    nodes: Vec<NodeState>,
    counters: ByteCounters,
    queue: RedundantQueue,
}

impl Cluster {
    /// Resilient cluster with a redundancy plan for `config.redundancy_degree`
    /// simultaneous failures.
    pub fn new(problem: Arc<Problem>, config: ClusterConfig) -> Result<Self> {
        if config.num_nodes != problem.num_nodes() {
            return Err(Error::InvalidConfig(format!(
                "cluster has {} nodes but the problem is partitioned for {}",
                config.num_nodes,
                problem.num_nodes()
            )));
        }
        let plan = compute_extra_sets(
            problem.comm_plan(),
            problem.partition(),
            config.redundancy_degree,
        )?;
        let mut cluster = Self::unprotected(problem);
        cluster.redundancy_degree = config.redundancy_degree;
        cluster.redundancy = Some(Arc::new(plan));
        Ok(cluster)
    }

    /// Cluster without redundancy, used for plain runs and inner solves.
    pub fn unprotected(problem: Arc<Problem>) -> Self {
        let nodes = (0..problem.num_nodes())
            .map(|rank| NodeState::new(rank, problem.statics(rank)))
            .collect();
        Self {
            problem,
            redundancy_degree: 0,
            redundancy: None,
            nodes,
            counters: ByteCounters::default(),
            queue: RedundantQueue::new(3),
        }
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn redundancy_degree(&self) -> usize {
        self.redundancy_degree
    }

    pub fn redundancy_plan(&self) -> Option<&RedundancyPlan> {
        self.redundancy.as_deref()
    }

    pub(crate) fn redundancy_plan_arc(&self) -> Option<Arc<RedundancyPlan>> {
        self.redundancy.clone()
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn node(&self, rank: usize) -> &NodeState {
        &self.nodes[rank]
    }

    pub fn node_mut(&mut self, rank: usize) -> &mut NodeState {
        &mut self.nodes[rank]
    }

    pub fn counters(&self) -> ByteCounters {
        self.counters
    }

    pub fn queue(&self) -> &RedundantQueue {
        &self.queue
    }

    pub fn queue_mut(&mut self) -> &mut RedundantQueue {
        &mut self.queue
    }

    pub fn alive_ranks(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.alive).map(|n| n.rank).collect()
    }

    /// Runs a node-local computation on every node in ascending rank order.
    /// Fails without touching any node if one of them is dead.
    pub fn compute<T>(&mut self, mut f: impl FnMut(&mut NodeState) -> T) -> Result<Vec<T>> {
        self.require_all_alive()?;
        Ok(self.nodes.iter_mut().map(&mut f).collect())
    }

    /// Collects messages built by each live node from its own state.
    pub fn collect_messages(
        &self,
        mut f: impl FnMut(&NodeState) -> Vec<Message>,
    ) -> Vec<Message> {
        self.nodes
            .iter()
            .filter(|n| n.alive)
            .flat_map(|n| {
                let out = f(n);
                debug_assert!(out.iter().all(|m| m.source == n.rank));
                out
            })
            .collect()
    }

    /// Delivers messages deterministically, ordered by (source, dest, tag),
    /// and charges their byte volume to the per-tag counters.
    pub fn exchange(&mut self, mut messages: Vec<Message>) -> Result<Delivery> {
        for m in &messages {
            for rank in [m.source, m.dest] {
                if rank >= self.nodes.len() || !self.nodes[rank].alive {
                    return Err(Error::DeadNode { rank });
                }
            }
        }
        messages.sort_by(Message::ordering);
        let mut inboxes = vec![Vec::new(); self.nodes.len()];
        for m in messages {
            self.counters.add(m.tag, m.byte_size());
            inboxes[m.dest].push(m);
        }
        Ok(Delivery { inboxes })
    }

    /// Sum of one contribution per node, accumulated in ascending rank order
    /// so every node obtains the same bits. Charged as a reduce plus a
    /// broadcast of one scalar per non-root node.
    pub fn allreduce_sum(&mut self, contributions: &[f64]) -> Result<f64> {
        self.require_all_alive()?;
        if contributions.len() != self.nodes.len() {
            return Err(Error::LengthMismatch {
                expected: self.nodes.len(),
                actual: contributions.len(),
            });
        }
        self.counters
            .add(Tag::Scalar, 16 * (self.nodes.len() as u64 - 1));
        Ok(contributions
            .iter()
            .copied()
            .reduce(|acc, v| acc + v)
            .unwrap_or(0.0))
    }

    /// Computes a local value on every node and all-reduces it.
    pub fn allreduce_with(&mut self, f: impl FnMut(&mut NodeState) -> f64) -> Result<f64> {
        let local = self.compute(f)?;
        self.allreduce_sum(&local)
    }

    /// Destroys the dynamic data of every failed rank and marks it dead.
    pub fn inject_failure(&mut self, event: &FailureEvent) -> Result<()> {
        event.validate(self.nodes.len())?;
        for &rank in &event.failed_ranks {
            if !self.nodes[rank].alive {
                return Err(Error::DeadNode { rank });
            }
        }
        for &rank in &event.failed_ranks {
            self.nodes[rank].wipe();
        }
        self.queue.forget_nodes(&event.failed_ranks);
        Ok(())
    }

    /// Revives failed ranks as replacement nodes: same index range, zeroed
    /// dynamic data, static data reattached. Reloading is not accounted.
    pub fn promote_replacements(&mut self, event: &FailureEvent) {
        for &rank in &event.failed_ranks {
            let node = &mut self.nodes[rank];
            if !node.alive {
                node.statics = Some(self.problem.statics(rank));
                node.alive = true;
            }
        }
    }

    /// Assembles a global vector from per-node segments. Inspection only;
    /// never used by the simulated algorithms.
    pub fn assemble(&self, f: impl Fn(&NodeState) -> &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.problem.n());
        for n in &self.nodes {
            out.extend_from_slice(f(n));
        }
        out
    }

    fn require_all_alive(&self) -> Result<()> {
        match self.nodes.iter().find(|n| !n.alive) {
            Some(dead) => Err(Error::DeadNode { rank: dead.rank }),
            None => Ok(()),
        }
    }
}
