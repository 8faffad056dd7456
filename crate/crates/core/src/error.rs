use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("matrix market parse error at line {line}: {message}")]
    MatrixMarket { line: usize, message: String },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("preconditioner block starting at row {start} (size {size}) is not SPD")]
    NotSpd { start: usize, size: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("node {rank} is dead")]
    DeadNode { rank: usize },

    #[error("solver breakdown at iteration {iteration}: {what} = {value:e} (matrix or preconditioner not SPD)")]
    Breakdown {
        iteration: usize,
        what: &'static str,
        value: f64,
    },

    #[error("no convergence after {0} iterations")]
    MaxIterations(usize),

    #[error("index {index} of p^({tag}) has no surviving redundant copy")]
    MissingRedundantEntry { index: usize, tag: usize },

    #[error("unrecoverable failure: {0}")]
    Unrecoverable(String),
}
