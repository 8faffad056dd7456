//! Compressed sparse row storage and test-problem generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense vector segment. Plain `Vec<f64>`; the owning context fixes its length.
pub type DenseVector = Vec<f64>;

/// CSR matrix. Column indices are strictly increasing within each row and
/// duplicate entries are rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from raw CSR arrays, validating every structural invariant.
    pub fn from_csr(
        nrows: usize,
        ncols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != nrows + 1 {
            return Err(Error::InvalidMatrix(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                nrows + 1
            )));
        }
        if row_offsets[0] != 0 || row_offsets[nrows] != col_indices.len() {
            return Err(Error::InvalidMatrix(
                "row_offsets must start at 0 and end at nnz".into(),
            ));
        }
        if col_indices.len() != values.len() {
            return Err(Error::InvalidMatrix(
                "col_indices and values differ in length".into(),
            ));
        }
        for row in 0..nrows {
            let (lo, hi) = (row_offsets[row], row_offsets[row + 1]);
            if lo > hi {
                return Err(Error::InvalidMatrix(format!(
                    "row_offsets decreases at row {row}"
                )));
            }
            let cols = &col_indices[lo..hi];
            if let Some(&c) = cols.iter().find(|&&c| c >= ncols) {
                return Err(Error::IndexOutOfRange {
                    index: c,
                    dim: ncols,
                });
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidMatrix(format!(
                    "columns of row {row} are not strictly increasing"
                )));
            }
        }
        Ok(Self {
            nrows,
            ncols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds a matrix from (row, col, value) triplets in any order.
    /// Duplicate coordinates are an error.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(i, j, _) in &triplets {
            if i >= nrows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    dim: nrows,
                });
            }
            if j >= ncols {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    dim: ncols,
                });
            }
        }
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        if let Some(w) = triplets
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::InvalidMatrix(format!(
                "duplicate entry ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut row_offsets = vec![0; nrows + 1];
        for &(i, _, _) in &triplets {
            row_offsets[i + 1] += 1;
        }
        for i in 0..nrows {
            row_offsets[i + 1] += row_offsets[i];
        }
        let col_indices = triplets.iter().map(|t| t.1).collect();
        let values = triplets.iter().map(|t| t.2).collect();
        Ok(Self {
            nrows,
            ncols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Dimension of a square matrix.
    pub fn n(&self) -> usize {
        debug_assert!(self.is_square());
        self.nrows
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.row(i).0.binary_search(&j).is_ok()
    }

    /// Sequential `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<DenseVector> {
        if x.len() != self.ncols {
            return Err(Error::LengthMismatch {
                expected: self.ncols,
                actual: x.len(),
            });
        }
        Ok((0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect())
    }

    /// Row-major dense expansion.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in dense.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] = v;
            }
        }
        dense
    }

    /// Structural and numerical symmetry over all stored entries.
    pub fn is_symmetric(&self) -> bool {
        self.max_asymmetry() == Some(0.0)
    }

    /// `max |A[i,j] - A[j,i]|` over stored entries, counting a missing
    /// transpose entry as a structural mismatch. `None` for non-square matrices.
    pub fn max_asymmetry(&self) -> Option<f64> {
        if !self.is_square() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if !self.contains(j, i) {
                    return Some(f64::INFINITY);
                }
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        Some(worst)
    }
}

/// Submatrix `A[rows, cols]` with both index sets renumbered consecutively in
/// ascending original order. Index sets may be given unsorted; duplicates are
/// collapsed.
pub fn extract_submatrix(a: &SparseMatrix, rows: &[usize], cols: &[usize]) -> Result<SparseMatrix> {
    let rows = sorted_unique(rows, a.nrows())?;
    let cols = sorted_unique(cols, a.ncols())?;
    let mut col_map = vec![usize::MAX; a.ncols()];
    for (new, &old) in cols.iter().enumerate() {
        col_map[old] = new;
    }
    let mut row_offsets = Vec::with_capacity(rows.len() + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    row_offsets.push(0);
    for &i in &rows {
        let (rc, rv) = a.row(i);
        for (&c, &v) in rc.iter().zip(rv) {
            let mapped = col_map[c];
            if mapped != usize::MAX {
                col_indices.push(mapped);
                values.push(v);
            }
        }
        row_offsets.push(col_indices.len());
    }
    SparseMatrix::from_csr(rows.len(), cols.len(), row_offsets, col_indices, values)
}

fn sorted_unique(indices: &[usize], dim: usize) -> Result<Vec<usize>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
        return Err(Error::IndexOutOfRange { index: bad, dim });
    }
    let mut v = indices.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

/// 5-point Laplacian on a `grid_side x grid_side` grid with Dirichlet
/// boundaries: diagonal 4, neighbor couplings -1, lexicographic ordering.
pub fn generate_poisson2d(grid_side: usize) -> Result<SparseMatrix> {
    if grid_side == 0 {
        return Err(Error::InvalidConfig("grid_side must be at least 1".into()));
    }
    let m = grid_side;
    let n = m * m;
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(5 * n);
    let mut values = Vec::with_capacity(5 * n);
    row_offsets.push(0);
    for gy in 0..m {
        for gx in 0..m {
            let i = gy * m + gx;
            if gy > 0 {
                col_indices.push(i - m);
                values.push(-1.0);
            }
            if gx > 0 {
                col_indices.push(i - 1);
                values.push(-1.0);
            }
            col_indices.push(i);
            values.push(4.0);
            if gx + 1 < m {
                col_indices.push(i + 1);
                values.push(-1.0);
            }
            if gy + 1 < m {
                col_indices.push(i + m);
                values.push(-1.0);
            }
            row_offsets.push(col_indices.len());
        }
    }
    SparseMatrix::from_csr(n, n, row_offsets, col_indices, values)
}

/// Random symmetric banded matrix made SPD by strict diagonal dominance.
///
/// Each off-diagonal position within `bandwidth` of the diagonal is kept with
/// probability `density`; kept values are uniform in `[-1, 1)`.
pub fn random_banded_spd(n: usize, bandwidth: usize, density: f64, seed: u64) -> Result<SparseMatrix> {
    if n == 0 {
        return Err(Error::InvalidConfig("matrix size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidConfig(format!(
            "density {density} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    let mut row_abs = vec![0.0f64; n];
    for i in 0..n {
        for j in (i + 1)..n.min(i + bandwidth + 1) {
            if rng.gen::<f64>() < density {
                let v: f64 = rng.gen_range(-1.0..1.0);
                triplets.push((i, j, v));
                triplets.push((j, i, v));
                row_abs[i] += v.abs();
                row_abs[j] += v.abs();
            }
        }
    }
    for (i, s) in row_abs.iter().enumerate() {
        triplets.push((i, i, s + 1.0 + rng.gen::<f64>()));
    }
    SparseMatrix::from_triplets(n, n, triplets)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
