use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NtuaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NtuaError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("row {row} has L2 norm {norm}, expected 1 within {tolerance}")]
    NormViolation { row: usize, norm: f64, tolerance: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("duplicate class name {0:?}")]
    DuplicateClassName(String),

    #[error("label {label} at row {row} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (max |logit| = {max_abs_logit})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        max_abs_logit: f64,
    },

    #[error("cache would have no rows")]
    EmptyCache,

    #[error("empty test set")]
    EmptyTestSet,

    #[error("no teacher prediction for cached sample {0:?}")]
    MissingTeacher(String),

    #[error("no feature for sample {0:?}")]
    MissingFeature(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("invalid utf-8 in id table: {0}")]
    Utf8(#[from] std::string::FromUtf8Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl NtuaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NtuaError::Invalid(msg.into())
    }
}
