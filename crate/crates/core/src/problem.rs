//! Static solver data: matrix, right-hand side, initial guess and
//! preconditioner, plus the per-node slices handed to each rank.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::precond::{BlockJacobiPreconditioner, DenseBlock};
use crate::redundancy::{build_comm_plan, CommPlan};
use crate::sparse::SparseMatrix;

/// Maximum block Jacobi block dimension used unless configured otherwise.
pub const DEFAULT_MAX_BLOCK: usize = 10;

/// The rows of `A` owned by one node, with columns renumbered into an
/// extended local layout: owned indices first (`0..len`), then ghost indices
/// (`len..len + ghosts.len()`) in ascending global order.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRows {
    row_offsets: Vec<usize>,
    local_cols: Vec<usize>,
    global_cols: Vec<usize>,
    values: Vec<f64>,
    ghosts: Vec<usize>,
}

impl LocalRows {
    fn new(a: &SparseMatrix, range: Range<usize>) -> Self {
        let mut ghosts: Vec<usize> = range
            .clone()
            .flat_map(|i| a.row(i).0.iter().copied())
            .filter(|c| !range.contains(c))
            .collect();
        ghosts.sort_unstable();
        ghosts.dedup();
        let len = range.len();
        let mut row_offsets = vec![0];
        let mut local_cols = Vec::new();
        let mut global_cols = Vec::new();
        let mut values = Vec::new();
        for i in range.clone() {
            let (cols, vals) = a.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let local = if range.contains(&c) {
                    c - range.start
                } else {
                    len + ghosts.binary_search(&c).expect("ghost collected above")
                };
                local_cols.push(local);
                global_cols.push(c);
                values.push(v);
            }
            row_offsets.push(values.len());
        }
        Self {
            row_offsets,
            local_cols,
            global_cols,
            values,
            ghosts,
        }
    }

    pub fn nrows(&self) -> usize {
        self.row_offsets.len() - 1
    }

    /// Global indices of the off-node columns this node reads.
    pub fn ghosts(&self) -> &[usize] {
        &self.ghosts
    }

    /// Position of a global ghost index inside `ghosts()`.
    pub fn ghost_slot(&self, global: usize) -> Option<usize> {
        self.ghosts.binary_search(&global).ok()
    }

    /// `q = A[own rows, :] * v` where `v` is laid out as owned ++ ghosts.
    pub fn multiply(&self, extended: &[f64]) -> Vec<f64> {
        (0..self.nrows())
            .map(|i| {
                let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
                self.local_cols[lo..hi]
                    .iter()
                    .zip(&self.values[lo..hi])
                    .map(|(&c, &v)| v * extended[c])
                    .sum()
            })
            .collect()
    }

    /// Global column indices and values of local row `i`.
    pub fn row_global(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.global_cols[lo..hi], &self.values[lo..hi])
    }
}

/// Everything a node must reload from safe storage after replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticData {
    pub range: Range<usize>,
    pub rows: LocalRows,
    pub rhs: Vec<f64>,
    pub x0: Vec<f64>,
    pub blocks: Vec<DenseBlock>,
}

#[derive(Debug, Clone)]
pub struct Problem {
    matrix: SparseMatrix,
    rhs: Vec<f64>,
    x0: Vec<f64>,
    partition: Partition,
    precond: BlockJacobiPreconditioner,
    comm: CommPlan,
    statics: Vec<Arc<StaticData>>,
}

impl Problem {
    /// Distributes `A x = b` over `partition`. `x0` defaults to zero.
    pub fn new(
        matrix: SparseMatrix,
        rhs: Vec<f64>,
        x0: Option<Vec<f64>>,
        partition: Partition,
        max_block: usize,
    ) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidMatrix(format!(
                "matrix is {}x{}, not square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let n = matrix.n();
        for len in [rhs.len(), partition.n()] {
            if len != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        let x0 = x0.unwrap_or_else(|| vec![0.0; n]);
        if x0.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: x0.len(),
            });
        }
        let precond = BlockJacobiPreconditioner::build(&matrix, &partition, max_block)?;
        let comm = build_comm_plan(&matrix, &partition)?;
        let statics = partition
            .ranges()
            .iter()
            .map(|range| {
                Arc::new(StaticData {
                    range: range.clone(),
                    rows: LocalRows::new(&matrix, range.clone()),
                    rhs: rhs[range.clone()].to_vec(),
                    x0: x0[range.clone()].to_vec(),
                    blocks: precond.blocks_in(range.clone()).to_vec(),
                })
            })
            .collect();
        Ok(Self {
            matrix,
            rhs,
            x0,
            partition,
            precond,
            comm,
            statics,
        })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn preconditioner(&self) -> &BlockJacobiPreconditioner {
        &self.precond
    }

    pub fn comm_plan(&self) -> &CommPlan {
        &self.comm
    }

    pub fn num_nodes(&self) -> usize {
        self.partition.num_nodes()
    }

    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub(crate) fn statics(&self, rank: usize) -> Arc<StaticData> {
        Arc::clone(&self.statics[rank])
    }
}
