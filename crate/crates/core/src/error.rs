use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u16, found: u16 },

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("task {found} arrived out of order (expected task index {expected})")]
    OutOfOrderTask { expected: usize, found: usize },

    #[error("training set of task `{task}` contains anomalous image {image_id}")]
    LabelLeakage { task: String, image_id: u64 },

    #[error("missing category `{0}`")]
    MissingCategory(String),

    #[error("metric `{0}` needs both normal and anomalous samples")]
    SingleClass(&'static str),

    #[error("r-matrix entry ({row}, {col}) is missing")]
    MissingEntry { row: usize, col: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
