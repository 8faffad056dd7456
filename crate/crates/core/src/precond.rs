//! Block Jacobi preconditioner with partition-respecting dense blocks.
//!
//! Within every partition range of length `L` the diagonal of `A` is cut into
//! `ceil(L / max_block)` consecutive blocks of near-uniform size (leading
//! blocks one larger when the division is uneven). Each block is Cholesky
//! factorized once; applying the preconditioner is a set of independent
//! triangular solves, so `z = M r` never needs data from another node.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::sparse::SparseMatrix;

/// One dense diagonal block `A[start..start+dim, start..start+dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    start: usize,
    dim: usize,
    /// Row-major copy of the block.
    matrix: Vec<f64>,
    /// Row-major lower Cholesky factor `L` with `L L^T = block`.
    factor: Vec<f64>,
}

impl DenseBlock {
    fn extract(a: &SparseMatrix, start: usize, dim: usize) -> Result<Self> {
        let mut matrix = vec![0.0; dim * dim];
        for li in 0..dim {
            let (cols, vals) = a.row(start + li);
            for (&c, &v) in cols.iter().zip(vals) {
                if (start..start + dim).contains(&c) {
                    matrix[li * dim + (c - start)] = v;
                }
            }
        }
        let factor = cholesky(&matrix, dim).ok_or(Error::NotSpd { start, size: dim })?;
        Ok(Self {
            start,
            dim,
            matrix,
            factor,
        })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.dim
    }

    /// Solves `block * z = r` in place.
    fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.dim;
        let l = &self.factor;
        for i in 0..n {
            let mut s = rhs[i];
            for k in 0..i {
                s -= l[i * n + k] * rhs[k];
            }
            rhs[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * rhs[k];
            }
            rhs[i] = s / l[i * n + i];
        }
    }

    fn multiply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            out[i] = (0..n).map(|k| self.matrix[i * n + k] * v[k]).sum();
        }
    }
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Sizes of the fewest near-uniform blocks of dimension `<= max_block`
/// covering a range of length `len`.
pub fn block_sizes(len: usize, max_block: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let count = len.div_ceil(max_block);
    let base = len / count;
    let extra = len % count;
    (0..count).map(|b| base + usize::from(b < extra)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobiPreconditioner {
    n: usize,
    block_size_max: usize,
    blocks: Vec<DenseBlock>,
}

impl BlockJacobiPreconditioner {
    pub fn build(a: &SparseMatrix, part: &Partition, max_block: usize) -> Result<Self> {
        if max_block == 0 {
            return Err(Error::InvalidConfig("max_block must be at least 1".into()));
        }
        if !a.is_square() || a.nrows() != part.n() {
            return Err(Error::LengthMismatch {
                expected: part.n(),
                actual: a.nrows(),
            });
        }
        let mut blocks = Vec::new();
        for range in part.ranges() {
            let mut start = range.start;
            for size in block_sizes(range.len(), max_block) {
                blocks.push(DenseBlock::extract(a, start, size)?);
                start += size;
            }
        }
        Ok(Self {
            n: a.nrows(),
            block_size_max: max_block,
            blocks,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn block_size_max(&self) -> usize {
        self.block_size_max
    }

    pub fn blocks(&self) -> &[DenseBlock] {
        &self.blocks
    }

    /// Blocks lying entirely inside `range`. Panics if a block straddles it.
    pub fn blocks_in(&self, range: Range<usize>) -> &[DenseBlock] {
        let lo = self.blocks.partition_point(|b| b.start < range.start);
        let hi = self.blocks.partition_point(|b| b.start < range.end);
        let sel = &self.blocks[lo..hi];
        assert!(
            sel.first().is_none_or(|b| b.start == range.start)
                && sel.last().is_none_or(|b| b.start + b.dim == range.end),
            "preconditioner block crosses range {range:?}"
        );
        sel
    }

    /// `z = M r` over the full index space.
    pub fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                actual: r.len(),
            });
        }
        let mut z = r.to_vec();
        apply_blocks(&self.blocks, 0, &mut z);
        Ok(z)
    }
}

/// In-place `z = M r` for the blocks covering a segment that starts at global
/// index `offset`.
pub fn apply_blocks(blocks: &[DenseBlock], offset: usize, segment: &mut [f64]) {
    for b in blocks {
        let lo = b.start - offset;
        b.solve_in_place(&mut segment[lo..lo + b.dim]);
    }
}

/// `r = M^{-1} z`, i.e. multiplication by the original diagonal blocks.
pub fn unapply_blocks(blocks: &[DenseBlock], offset: usize, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for b in blocks {
        let lo = b.start - offset;
        b.multiply(&z[lo..lo + b.dim], &mut out[lo..lo + b.dim]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::make_block_row_partition;
    use crate::sparse::generate_poisson2d;

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn block_sizing() {
        assert_eq!(block_sizes(10, 10), vec![10]);
        assert_eq!(block_sizes(25, 10), vec![9, 8, 8]);
        assert_eq!(block_sizes(7, 1), vec![1; 7]);
        assert_eq!(block_sizes(11, 10), vec![6, 5]);
    }

    #[test]
    fn one_block_of_ten_per_node() {
        let a = generate_poisson2d(5).unwrap();
        let part = Partition::from_lengths(&[10, 10, 5]).unwrap();
        let m = BlockJacobiPreconditioner::build(&a, &part, 10).unwrap();
        let dims: Vec<usize> = m.blocks().iter().map(|b| b.dim()).collect();
        assert_eq!(dims, vec![10, 10, 5]);
    }

    #[test]
    fn blocks_never_cross_partition_boundaries() {
        let a = generate_poisson2d(9).unwrap();
        for nodes in 1..=9 {
            let part = make_block_row_partition(a.n(), nodes).unwrap();
            let m = BlockJacobiPreconditioner::build(&a, &part, 10).unwrap();
            for b in m.blocks() {
                assert!(b.dim() <= 10);
                let owner = part.owner(b.start());
                assert!(part.range(owner).end >= b.start() + b.dim());
            }
            for rank in 0..nodes {
                let covered: usize = m.blocks_in(part.range(rank)).iter().map(|b| b.dim()).sum();
                assert_eq!(covered, part.len_of(rank));
            }
        }
    }

    #[test]
    fn diagonal_matrix_scales_by_inverse_diagonal() {
        let a = SparseMatrix::from_diagonal(&[2.0, 4.0, 5.0, 8.0]);
        let part = make_block_row_partition(4, 2).unwrap();
        let m = BlockJacobiPreconditioner::build(&a, &part, 10).unwrap();
        let z = m.apply(&[2.0, 4.0, 1.0, 2.0]).unwrap();
        assert_close(&z, &[1.0, 1.0, 0.2, 0.25]);
    }

    #[test]
    fn identity_blocks_pass_through() {
        let a = SparseMatrix::identity(6);
        let part = make_block_row_partition(6, 3).unwrap();
        let m = BlockJacobiPreconditioner::build(&a, &part, 10).unwrap();
        let r = vec![1.5, -2.0, 3.0, 0.0, 7.0, -1.0];
        assert_eq!(m.apply(&r).unwrap(), r);
    }

    #[test]
    fn two_by_two_diagonal_block() {
        let a = SparseMatrix::from_diagonal(&[2.0, 4.0]);
        let part = make_block_row_partition(2, 1).unwrap();
        let m = BlockJacobiPreconditioner::build(&a, &part, 10).unwrap();
        assert_eq!(m.blocks().len(), 1);
        assert_close(&m.apply(&[2.0, 4.0]).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_spd_block_named() {
        let a = SparseMatrix::from_triplets(
            3,
            3,
            vec![(0, 0, 1.0), (1, 1, 1.0), (1, 2, 2.0), (2, 1, 2.0), (2, 2, 1.0)],
        )
        .unwrap();
        let part = Partition::from_lengths(&[1, 2]).unwrap();
        match BlockJacobiPreconditioner::build(&a, &part, 10) {
            Err(Error::NotSpd { start, size }) => assert_eq!((start, size), (1, 2)),
            other => panic!("expected NotSpd, got {other:?}"),
        }
    }

    #[test]
    fn apply_length_mismatch() {
        let a = SparseMatrix::identity(4);
        let part = make_block_row_partition(4, 2).unwrap();
        let m = BlockJacobiPreconditioner::build(&a, &part, 10).unwrap();
        assert!(m.apply(&[1.0; 3]).is_err());
    }

    #[test]
    fn unapply_inverts_apply() {
        let a = generate_poisson2d(4).unwrap();
        let part = make_block_row_partition(16, 2).unwrap();
        let m = BlockJacobiPreconditioner::build(&a, &part, 5).unwrap();
        let r: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let z = m.apply(&r).unwrap();
        let back = unapply_blocks(m.blocks(), 0, &z);
        for (x, y) in back.iter().zip(&r) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
