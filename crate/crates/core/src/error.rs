use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed record {id}: {reason}")]
    MalformedRecord { id: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("invalid k={k} for {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("invalid cluster count M={m} for {n} points")]
    InvalidM { m: usize, n: usize },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),

    #[error("input is empty")]
    Empty,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("weights sum to {0}, expected 1")]
    NotNormalized(f64),

    #[error("inconsistent batch: {0}")]
    InconsistentBatch(String),

    #[error("training diverged at step {step}: {reason}")]
    DivergedLoss { step: usize, reason: String },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),

    #[error("selection is empty")]
    EmptySelection,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint rejected: {0}")]
    BadCheckpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
