use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("missing column `{0}` in csv header")]
    MissingColumn(String),

    #[error("row {row}: cannot parse `{value}` as a number for `{column}`")]
    UnparseableNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: missing value for `{column}`")]
    MissingValue { row: usize, column: String },

    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error("cell ({group}, {label}) has {available} records, {required} required")]
    InsufficientCell {
        group: String,
        label: String,
        available: usize,
        required: usize,
    },

    #[error("group `{0}` absent from data")]
    GroupAbsent(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("sequence of {needed} positions exceeds context length {context_len}")]
    ContextOverflow { needed: usize, context_len: usize },

    #[error("non-finite value encountered: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("fingerprint mismatch for {artifact}: expected {expected}, found {found}")]
    FingerprintMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("request failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
