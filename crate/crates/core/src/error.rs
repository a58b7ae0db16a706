use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zeek log line {line}: {message}")]
    ZeekHeader { line: usize, message: String },

    #[error("unknown feature column `{0}`")]
    UnknownColumn(String),

    #[error("no benign class in label vocabulary")]
    NoBenignClass,

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("non-finite value while probing parameter {index}")]
    NonFiniteProbe { index: usize },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("forward cache already consumed by a backward pass")]
    CacheConsumed,

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("class id {id} out of range for {n_classes} classes")]
    ClassOutOfRange { id: usize, n_classes: usize },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint checksum error: {0}")]
    Checksum(String),

    #[error("checkpoint version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },

    #[error("incompatible data: {0}")]
    Incompatible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
