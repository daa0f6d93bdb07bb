//! Crate-wide error type. Numerical failures carry enough context to locate
//! the offending graph node or matrix.

use thiserror::Error;

/// Errors produced by tensor ops, the expression graph, data loading,
/// training schedules, diagnostics, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value produced at graph node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("zero-norm row {row} at graph node {node}; cosine/l2norm require non-zero rows")]
    ZeroNormRow { node: usize, row: usize },

    #[error("zero-norm vector passed to {context}")]
    ZeroNorm { context: &'static str },

    #[error("unknown input binding '{0}'")]
    UnknownBinding(String),

    #[error("input '{0}' rebound with mismatched shape")]
    BindingShape(String),

    #[error("loss node must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("node {0} is not reachable from the loss node")]
    Unreachable(usize),

    #[error("batchnorm requires a batch of at least 2 rows in train mode, got {0}")]
    BatchNormBatch(usize),

    #[error("matrix is row-rank deficient (sigma_min = {sigma_min:e}, tolerance = {tol:e})")]
    RankDeficient { sigma_min: f64, tol: f64 },

    #[error("non-finite gradient passed to optimizer step")]
    NonFiniteGradient,

    #[error("malformed dataset file {path}: {reason}")]
    MalformedData { path: String, reason: String },

    #[error("malformed tensor stream: {0}")]
    MalformedTensor(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
