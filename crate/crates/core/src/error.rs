//! Error types shared across the auditor.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    MalformedRecord {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: duplicate sample id {id:?} (line {line})")]
    DuplicateId { path: String, id: String, line: usize },

    #[error("{0}: dataset contains no records")]
    EmptyDataset(String),

    /// A caller violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration value failed validation; `field` names the offending key.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("similarity: {0}")]
    Similarity(String),

    #[error("dataset yields no analyzable samples")]
    NoAnalyzableSamples,

    #[error("missing responses for sample(s): {}", .0.join(", "))]
    MissingResponses(Vec<String>),

    #[error("endpoint {endpoint} does not support {capability}")]
    Capability { endpoint: String, capability: String },

    #[error("endpoint {endpoint}: protocol violation: {message}")]
    Protocol { endpoint: String, message: String },

    #[error("endpoint {endpoint}: all {failed} request(s) failed; last error: {last}")]
    EndpointUnreachable {
        endpoint: String,
        failed: usize,
        last: String,
    },

    #[error("request failed: {0}")]
    Request(#[from] crate::gateway::RequestError),

    #[error("cache-only mode: {} missing cache entr(ies): {}", .0.len(), preview(.0))]
    CacheMiss(Vec<String>),

    #[error("digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

fn preview(items: &[String]) -> String {
    const SHOWN: usize = 5;
    let mut s = items.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if items.len() > SHOWN {
        s.push_str(&format!(", ... ({} more)", items.len() - SHOWN));
    }
    s
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors the operator fixes by editing configuration or inputs.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::MalformedRecord { .. }
                | Error::DuplicateId { .. }
                | Error::EmptyDataset(_)
                | Error::Parse { .. }
                | Error::InvalidArgument(_)
        )
    }
}
