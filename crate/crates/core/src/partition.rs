use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous block-row distribution of `[0, n)` over `num_nodes` nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    n: usize,
    ranges: Vec<Range<usize>>,
}

impl Partition {
    /// Builds a partition from explicit consecutive range lengths.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::InvalidPartition("no nodes".into()));
        }
        if let Some(node) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::InvalidPartition(format!("node {node} owns no index")));
        }
        let mut ranges = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            ranges.push(start..start + len);
            start += len;
        }
        Ok(Self { n: start, ranges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_nodes(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn range(&self, rank: usize) -> Range<usize> {
        self.ranges[rank].clone()
    }

    pub fn len_of(&self, rank: usize) -> usize {
        self.ranges[rank].len()
    }

    /// Rank owning global index `i`.
    pub fn owner(&self, i: usize) -> usize {
        debug_assert!(i < self.n);
        self.ranges.partition_point(|r| r.end <= i)
    }

    /// Sorted global indices owned by the given ranks.
    pub fn indices_of(&self, ranks: &[usize]) -> Vec<usize> {
        let mut ranks = ranks.to_vec();
        ranks.sort_unstable();
        ranks.dedup();
        ranks.iter().flat_map(|&r| self.range(r)).collect()
    }
}

/// Splits `[0, n)` into `num_nodes` consecutive ranges whose sizes differ by
/// at most one; leading nodes receive the larger size.
pub fn make_block_row_partition(n: usize, num_nodes: usize) -> Result<Partition> {
    if num_nodes == 0 {
        return Err(Error::InvalidPartition("need at least one node".into()));
    }
    if num_nodes > n {
        return Err(Error::InvalidPartition(format!(
            "{num_nodes} nodes cannot each own an index of {n}"
        )));
    }
    let base = n / num_nodes;
    let extra = n % num_nodes;
    let lengths: Vec<usize> = (0..num_nodes)
        .map(|s| base + usize::from(s < extra))
        .collect();
    Partition::from_lengths(&lengths)
}
