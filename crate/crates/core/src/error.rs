use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("inconsistent evidence: {0}")]
    InconsistentEvidence(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("illegal action {action}: {reason}")]
    IllegalAction { action: usize, reason: String },

    #[error("no legal action available")]
    NoLegalAction,

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn digest(expected: &str, found: &str) -> Self {
        Error::DigestMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub(crate) fn shape_check(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Shape(format!(
            "{what}: expected length {expected}, found {found}"
        )));
    }
    Ok(())
}
