use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate target: standard deviation {std:e} is below {threshold:e}")]
    DegenerateTarget { std: f64, threshold: f64 },

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("schema mismatch on field `{field}`: {detail}")]
    SchemaMismatch { field: String, detail: String },

    #[error("corrupt archive header: {0}")]
    CorruptHeader(String),

    #[error("truncated chunk {index}: needs {needed} bytes at offset {offset}, file has {available}")]
    TruncatedChunk { index: usize, offset: u64, needed: u64, available: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint {path} not found")]
    MissingCheckpoint { path: PathBuf },

    #[error("checkpoint incompatible with model: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("run directory {path} is locked by another writer")]
    Locked { path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}
pub(crate) use arg_err;
pub(crate) use shape_err;
