use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward pass: {0}")]
    Backward(String),

    #[error("line {line}: field `{field}`: {reason}")]
    Parse { line: usize, field: String, reason: String },

    #[error("truncated record at byte offset {offset} (record stride {stride} bytes)")]
    Truncated { offset: usize, stride: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("object placement failed after {attempts} attempts")]
    Placement { attempts: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in term `{term}` at epoch {epoch}")]
    NanLoss { term: String, epoch: usize },

    #[error("ablation cell `{cell}` failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
