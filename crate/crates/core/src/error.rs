use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MpbmError>;

#[derive(Debug, Error)]
pub enum MpbmError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("training diverged during {phase} at step {step}: loss = {loss}")]
    Divergence {
        phase: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("architecture mismatch:\n  checkpoint: {checkpoint}\n  expected:   {expected}")]
    ArchitectureMismatch { checkpoint: String, expected: String },

    #[error("unsupported transform `{kind}` for input shape {shape:?}")]
    UnsupportedShift { kind: String, shape: Vec<usize> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MpbmError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MpbmError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MpbmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        MpbmError::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
