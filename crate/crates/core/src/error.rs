use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),

    #[error("parse: {0}")]
    Parse(#[from] ParseError),

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("empty messages")]
    EmptyMessages,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("remote returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed remote payload: {0}")]
    MalformedPayload(String),
    #[error("backend not configured: {0}")]
    NotConfigured(String),
    #[error("script exhausted")]
    ScriptExhausted,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("no {0} payload found")]
    NotFound(&'static str),
    #[error("{hint} payload failed validation: {reason}")]
    Invalid { hint: &'static str, reason: String },
}
