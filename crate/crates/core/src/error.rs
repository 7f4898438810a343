use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum MhstError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid span ({start}, {end})")]
    InvalidSpan { start: usize, end: usize },
    #[error("hypothesis list is empty")]
    EmptyTree,
    #[error("empty sample set: {0}")]
    EmptySet(String),
    #[error("trace replay failed: {0}")]
    Replay(String),
    #[error("non-finite loss at epoch {epoch}, video {video_id}: rank={rank} inter={inter} intra={intra}")]
    NonFiniteLoss {
        epoch: usize,
        video_id: String,
        rank: f64,
        inter: f64,
        intra: f64,
    },
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{path}:{line}: bad field `{field}`: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("oracle limit exceeded: {0} frames (max 12)")]
    OracleLimit(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MhstError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MhstError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MhstError>;
