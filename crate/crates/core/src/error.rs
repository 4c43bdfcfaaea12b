use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed MR at offset {offset}: {reason}")]
    MalformedMr { offset: usize, reason: String },

    #[error("slot `{0}` is not part of the meaning representation")]
    UnknownSlot(String),

    #[error("boolean slot name `{0}` has no noun left after stripping")]
    NoNoun(String),

    #[error("slot error rate is undefined: no checkable slots")]
    EmptyDenominator,

    #[error("config error: {0}")]
    Config(String),

    #[error("slot `{0}` has no value inventory")]
    MissingInventory(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error at row {row}: {reason}")]
    Csv { row: usize, reason: String },

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("source contains prompt token id {0} but no prompt parameters were supplied")]
    PromptIdWithoutParams(u32),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: header says {expected}, payload hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("frozen base parameters changed during {stage}: {before} -> {after}")]
    FrozenViolation {
        stage: String,
        before: String,
        after: String,
    },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(offset: usize, reason: impl Into<String>) -> Self {
        Error::MalformedMr {
            offset,
            reason: reason.into(),
        }
    }
}
