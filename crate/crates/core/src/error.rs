use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unsupported audio format: {property} is {found}, expected {expected}")]
    Format { property: &'static str, found: String, expected: String },

    #[error("{what} too short: need at least {needed} samples, got {got}")]
    Length { what: &'static str, needed: usize, got: usize },

    #[error("not enough {what}: requested {requested}, at most {available} available")]
    Capacity { what: &'static str, requested: usize, available: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in `{tensor}`")]
    Numeric { tensor: String },

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("unknown utterance `{0}`")]
    Lookup(String),

    #[error("pseudo-labels missing for {} utterance(s): {}", .missing.len(), .missing.join(", "))]
    Coverage { missing: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
