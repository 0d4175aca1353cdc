//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below {min:e}; similarity is undefined")]
    ZeroVector { min: f64 },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("point outside the unit ball (norm {norm})")]
    OutsideBall { norm: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("batch contains no anchors")]
    EmptyBatch,

    #[error("margin table built for epoch {table_epoch} used in epoch {current_epoch}")]
    StaleMarginTable { table_epoch: u64, current_epoch: u64 },

    #[error("label flipping requires at least 2 classes, got {classes}")]
    TooFewClasses { classes: usize },

    #[error("{path}:{line}: {message}")]
    MalformedFile {
        path: String,
        line: usize,
        message: String,
    },

    #[error("inconsistent dimensions: {0}")]
    InconsistentDimensions(String),

    #[error("unknown magic {found:?}, expected {expected:?}")]
    UnknownMagic { found: String, expected: &'static str },

    #[error("invalid hierarchy spec: {0}")]
    InvalidSpec(String),

    #[error("unsatisfiable batch spec: {0}")]
    UnsatisfiableBatchSpec(String),

    #[error("k = {k} too large for {n} samples")]
    KTooLarge { k: usize, n: usize },

    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}
