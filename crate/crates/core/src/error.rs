//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("sequence too short: length {len} is below kernel size {kernel}")]
    SequenceTooShort { len: usize, kernel: usize },

    #[error("empty axis in {0}")]
    EmptyAxis(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("email `{0}` is empty after normalization")]
    EmptyEmail(String),

    #[error("invalid label {0}; expected 0 (benign) or 1 (phishing)")]
    InvalidLabel(i64),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("malformed {kind} at {path}:{line}: {msg}")]
    Parse {
        kind: &'static str,
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
