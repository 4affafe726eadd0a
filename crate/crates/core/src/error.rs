use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input rejected before any work was done.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("payload mismatch: header implies {expected} bytes, file has {actual}")]
    PayloadMismatch { expected: usize, actual: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unknown {kind} {name:?}; available: {available}")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("graph error: {0}")]
    Graph(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Validation errors are caller mistakes; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Shape { .. }
                | Error::Manifest(_)
                | Error::UnknownStrategy { .. }
                | Error::BadMagic { .. }
                | Error::Header(_)
                | Error::PayloadMismatch { .. }
                | Error::Truncated(_)
                | Error::Open { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
