use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("slice out of bounds in dimension {dim}: offset {offset} + extent {extent} > {size}")]
    OutOfBounds {
        dim: usize,
        offset: usize,
        extent: usize,
        size: usize,
    },

    #[error("partition: {0}")]
    Partition(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: String },

    #[error("{path}: unsupported data type code {code}")]
    UnsupportedDtype { path: PathBuf, code: i32 },

    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { path: PathBuf, stored: u64, computed: u64 },

    #[error("{path}: expected {expected} feature levels, found {found}")]
    LevelCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("no features available for subject {0:?}")]
    MissingSubject(String),

    #[error("orientation: {0}")]
    Orientation(String),

    #[error("normalize: {0}")]
    Normalize(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape { op, msg: msg.into() }
    }
}
