use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ranker::Repair;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Whether a backend failure is worth retrying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Transient,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{kind:?} backend failure (status {status:?}): {message}")]
pub struct BackendError {
    pub kind: FailureKind,
    pub status: Option<u16>,
    pub message: String,
}

impl BackendError {
    pub fn transient(status: Option<u16>, message: impl Into<String>) -> Self {
        Self { kind: FailureKind::Transient, status, message: message.into() }
    }

    pub fn fatal(status: Option<u16>, message: impl Into<String>) -> Self {
        Self { kind: FailureKind::Fatal, status, message: message.into() }
    }

    pub fn is_retryable(&self) -> bool {
        self.kind == FailureKind::Transient
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("history contains no turns")]
    EmptyHistory,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset task {index}: {message}")]
    TaskParse { index: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("ranking output needs repairs {repairs:?}")]
    Format { repairs: Vec<Repair> },

    #[error("no usable <ranking> block in proxy output")]
    MissingRanking,

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("request exceeds the model context window: {0}")]
    ContextOverflow(String),

    #[error("ablation call for cutoff index {cutoff_index} failed: {source}")]
    Ablation {
        cutoff_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch in entry `{entry}`: {message}")]
    Shape { entry: String, message: String },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

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
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    /// True for failures a caller may reasonably retry.
    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Backend(e) => e.is_retryable(),
            Error::Ablation { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}
