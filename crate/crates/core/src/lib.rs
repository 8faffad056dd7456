//! Distributed preconditioned conjugate gradient on a deterministic simulated
//! cluster, with exact state reconstruction (ESR), its periodic variant
//! (ESRP) and in-memory checkpoint/restart (IMCR).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cluster;
pub mod error;
pub mod matrix_market;
pub mod partition;
pub mod pcg;
pub mod precond;
pub mod problem;
pub mod recovery;
pub mod redundancy;
pub mod sparse;

pub use cluster::{ByteCounters, Cluster, ClusterConfig, FailureEvent, Message, Payload, Tag};
pub use error::{Error, Result};
pub use matrix_market::{load_matrix_market, save_matrix_market};
pub use partition::{make_block_row_partition, Partition};
pub use pcg::{converged, esrp_run, pcg_run, Mode, Phase, SolveOutcome, Solver, SolverConfig, TrajectoryLog};
pub use precond::BlockJacobiPreconditioner;
pub use problem::{Problem, DEFAULT_MAX_BLOCK};
pub use recovery::{Checkpoint, RecoveryReport};
pub use redundancy::{buddy, compute_extra_sets, RedundancyPlan, RedundantQueue};
pub use sparse::{extract_submatrix, generate_poisson2d, random_banded_spd, SparseMatrix};
