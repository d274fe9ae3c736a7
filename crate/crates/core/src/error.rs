// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every engine in the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to load model `{id}`: {reason}")]
    Load { id: String, reason: String },

    #[error("unsupported architecture family `{0}`")]
    UnsupportedArch(String),

    #[error("input of {len} positions exceeds the model limit of {max}")]
    InputTooLong { len: usize, max: usize },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("attribution scores are all zero; entropy is undefined")]
    DegenerateDistribution,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("corpus of {got} vectors is too small for these parameters (need at least {need})")]
    CorpusTooSmall { got: usize, need: usize },

    #[error("ingest failed at row {row}: {reason}")]
    Ingest { row: usize, reason: String },

    #[error("duplicate example ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),

    #[error("attribute `{name}` unavailable for example `{example}`: {reason}")]
    Attribute {
        name: String,
        example: String,
        reason: String,
    },

    #[error("corrupt artifact `{name}`: {reason}")]
    CorruptArtifact { name: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }

    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
