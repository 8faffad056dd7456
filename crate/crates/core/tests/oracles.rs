//! Checks against independent references: dense nalgebra linear algebra,
//! brute-force enumeration and a sequential PCG.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use esrp_core::precond::block_sizes;
use esrp_core::recovery::solve_inner_system;
use esrp_core::redundancy::{aspmv, build_comm_plan, product, Operand};
use esrp_core::{
    extract_submatrix, generate_poisson2d, load_matrix_market, make_block_row_partition,
    pcg_run, random_banded_spd, save_matrix_market, Cluster, ClusterConfig, Problem,
    SolverConfig, SparseMatrix,
};

fn dense(a: &SparseMatrix) -> DMatrix<f64> {
    let rows = a.to_dense();
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| rows[i][j])
}

fn wiggle(n: usize, seed: u64) -> Vec<f64> {
    (0..n)
        .map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
        .collect()
}

#[test]
fn poisson_smallest_eigenvalue() {
    let a = generate_poisson2d(2).unwrap();
    let eig = dense(&a).symmetric_eigen().eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    assert!((min - 2.0).abs() < 1e-12);
}

#[test]
fn diagonal_block_of_poisson_is_spd() {
    let a = generate_poisson2d(4).unwrap();
    let part = make_block_row_partition(16, 4).unwrap();
    let idx: Vec<usize> = part.range(1).collect();
    let sub = extract_submatrix(&a, &idx, &idx).unwrap();
    let eig = dense(&sub).symmetric_eigen().eigenvalues;
    assert!(eig.iter().all(|&l| l > 0.0));
}

#[test]
fn submatrix_matches_dense_slice() {
    let a = random_banded_spd(30, 4, 0.7, 11).unwrap();
    let rows = [2, 5, 6, 17, 29];
    let cols = [0, 5, 6, 7, 18, 28];
    let sub = extract_submatrix(&a, &rows, &cols).unwrap();
    let full = dense(&a);
    for (li, &i) in rows.iter().enumerate() {
        for (lj, &j) in cols.iter().enumerate() {
            assert_eq!(sub.get(li, lj), full[(i, j)]);
        }
    }
}

#[test]
fn matrix_market_round_trip() {
    let a = random_banded_spd(50, 6, 0.6, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mtx");
    save_matrix_market(&a, &path).unwrap();
    let back = load_matrix_market(&path).unwrap();
    assert_eq!(back, a);
}

#[test]
fn comm_plan_matches_dense_pattern() {
    let a = generate_poisson2d(4).unwrap();
    let part = make_block_row_partition(16, 4).unwrap();
    let plan = build_comm_plan(&a, &part).unwrap();
    let d = dense(&a);
    for s in 0..4 {
        for l in 0..4 {
            if s == l {
                continue;
            }
            for i in part.range(s) {
                let needed = part.range(l).any(|row| d[(row, i)] != 0.0);
                assert_eq!(plan.sends(s, l, i), needed, "s={s} l={l} i={i}");
            }
        }
    }
}

#[test]
fn banded_recipients_cover_nredu() {
    let a = random_banded_spd(40, 3, 0.5, 5).unwrap();
    let part = make_block_row_partition(40, 8).unwrap();
    let problem = Arc::new(Problem::new(a, vec![1.0; 40], None, part.clone(), 10).unwrap());
    let cluster = Cluster::new(Arc::clone(&problem), ClusterConfig::new(8, 3).unwrap()).unwrap();
    let plan = cluster.redundancy_plan().unwrap();
    for i in 0..40 {
        let owner = part.owner(i);
        let mut recipients: Vec<usize> = (0..8)
            .filter(|&l| {
                l != owner
                    && (problem.comm_plan().sends(owner, l, i)
                        || (1..=3).any(|k| plan.extra_set(owner, k).contains(&i) && plan.buddies(owner)[k - 1] == l))
            })
            .collect();
        recipients.dedup();
        assert!(recipients.len() >= 3, "index {i}: {recipients:?}");
    }
}

#[test]
fn distributed_spmv_matches_dense() {
    let a = generate_poisson2d(8).unwrap();
    let part = make_block_row_partition(64, 5).unwrap();
    let p = wiggle(64, 1);
    let expect = dense(&a) * DVector::from_vec(p.clone());
    let problem = Arc::new(Problem::new(a, vec![1.0; 64], None, part.clone(), 10).unwrap());
    let mut cluster = Cluster::unprotected(problem);
    for rank in 0..5 {
        cluster.node_mut(rank).p = p[part.range(rank)].to_vec();
    }
    let q: Vec<f64> = product(&mut cluster, Operand::P).unwrap().concat();
    let err = (DVector::from_vec(q) - &expect).norm() / expect.norm();
    assert!(err < 1e-13);
}

#[test]
fn every_failure_pair_recoverable_after_aspmv() {
    let a = generate_poisson2d(8).unwrap();
    let n = a.n();
    let part = make_block_row_partition(n, 8).unwrap();
    let problem = Arc::new(Problem::new(a, vec![1.0; n], None, part.clone(), 10).unwrap());
    let mut cluster = Cluster::new(problem, ClusterConfig::new(8, 2).unwrap()).unwrap();
    let p = wiggle(n, 4);
    for rank in 0..8 {
        cluster.node_mut(rank).p = p[part.range(rank)].to_vec();
    }
    aspmv(&mut cluster, 0).unwrap();
    let copy = cluster.queue().get(0).unwrap();
    for f1 in 0..8 {
        for f2 in (f1 + 1)..8 {
            for i in part.range(f1).chain(part.range(f2)) {
                let holder = copy
                    .holders(i)
                    .find(|&h| h != f1 && h != f2)
                    .unwrap_or_else(|| panic!("index {i} lost with {{{f1},{f2}}}"));
                assert_eq!(copy.held_by(holder)[&i], p[i]);
            }
        }
    }
}

/// Textbook PCG on global vectors with block Jacobi built from nalgebra
/// Cholesky factors.
fn sequential_pcg(a: &SparseMatrix, b: &[f64], ranges: &[std::ops::Range<usize>], rtol: f64) -> (usize, Vec<f64>) {
    let d = dense(a);
    let mut blocks = Vec::new();
    for range in ranges {
        let mut start = range.start;
        for size in block_sizes(range.len(), 10) {
            let chol = d.view((start, start), (size, size)).into_owned().cholesky().unwrap();
            blocks.push((start, size, chol));
            start += size;
        }
    }
    let precond = |r: &DVector<f64>| {
        let mut z = r.clone();
        for (start, size, chol) in &blocks {
            let seg = chol.solve(&r.rows(*start, *size).into_owned());
            z.rows_mut(*start, *size).copy_from(&seg);
        }
        z
    };
    let b = DVector::from_column_slice(b);
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut j = 0;
    while r.norm() / b.norm() >= rtol {
        let q = &d * &p;
        let alpha = rz / p.dot(&q);
        x += alpha * &p;
        r -= alpha * &q;
        z = precond(&r);
        let rz_new = r.dot(&z);
        p = &z + (rz_new / rz) * &p;
        rz = rz_new;
        j += 1;
    }
    (j, x.as_slice().to_vec())
}

#[test]
fn iteration_count_matches_sequential_reference() {
    let a = generate_poisson2d(16).unwrap();
    let n = a.n();
    let b = wiggle(n, 9);
    let part = make_block_row_partition(n, 8).unwrap();
    let (iters, x_ref) = sequential_pcg(&a, &b, part.ranges(), 1e-8);
    let problem = Arc::new(Problem::new(a.clone(), b.clone(), None, part, 10).unwrap());
    let out = pcg_run(problem, &SolverConfig::plain()).unwrap();
    assert_eq!(out.final_iteration, iters);
    let ax = a.mul_vec(&out.x).unwrap();
    let res: f64 = ax.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(res / bn < 1e-8);
    let dx: f64 = out.x.iter().zip(&x_ref).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(dx < 1e-6);
}

#[test]
fn inner_solve_matches_direct_solve() {
    let a = generate_poisson2d(16).unwrap();
    let part = make_block_row_partition(256, 8).unwrap();
    let idx: Vec<usize> = part.range(3).collect();
    let a_ff = extract_submatrix(&a, &idx, &idx).unwrap();
    let w = wiggle(idx.len(), 2);
    let out = solve_inner_system(&a_ff, &w, &[idx.len()], 1e-14, 10).unwrap();
    let direct = dense(&a_ff).cholesky().unwrap().solve(&DVector::from_vec(w));
    let err = (DVector::from_vec(out.x) - &direct).norm() / direct.norm();
    assert!(err < 1e-12, "{err:e}");
}

#[test]
fn inner_solve_trivial_systems() {
    let one = SparseMatrix::from_diagonal(&[4.0]);
    let out = solve_inner_system(&one, &[2.0], &[1], 1e-14, 10).unwrap();
    assert_eq!(out.x, vec![0.5]);
    assert_eq!(out.iterations, 1);
    let eye = SparseMatrix::identity(5);
    let w = vec![1.0, -2.0, 3.0, 0.5, 0.0];
    let out = solve_inner_system(&eye, &w, &[3, 2], 1e-14, 10).unwrap();
    assert_eq!(out.x, w);
}
