use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the numerical routines and matrix I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("invalid dimensions {rows}x{cols}: matrices must be non-empty")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("entry magnitude exceeds float64 exp range (exponent {value})")]
    ExpOverflow { value: f64 },

    #[error("kron result {rows}x{cols} exceeds the {cap}-entry cap")]
    KronTooLarge { rows: usize, cols: usize, cap: usize },

    #[error("exact path refuses n = {n} (cap {cap}); use the fast path instead")]
    ExactCapExceeded { n: usize, cap: usize },

    #[error("rank blowup: {rank} columns exceed rank cap {cap}; reduce B or relax eps")]
    RankBlowup { rank: usize, cap: usize },

    #[error("approximation destroyed row sums (row {row}, sum {value}); decrease eps_prime")]
    RowSumCollapse { row: usize, value: f64 },

    #[error("nonpositive row sum {value} at row {row}")]
    NonPositiveRowSum { row: usize, value: f64 },

    #[error("index out of range: {what} = {index}, limit {limit}")]
    IndexOutOfRange { what: &'static str, index: usize, limit: usize },

    #[error("instance invariant violated: {0}")]
    InvalidInstance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("oracle size cap exceeded: {0}")]
    OracleCapExceeded(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(op: &'static str, detail: impl Into<String>) -> Error {
    Error::DimensionMismatch { op, detail: detail.into() }
}
