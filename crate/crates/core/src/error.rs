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

    #[error("{source_name}: parse error at line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("{0} at line {1}")]
    InvalidRecord(String, usize),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("insufficient {what}: need {needed}, have {available}")]
    Insufficient {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error(
        "context overflow{}: {context_tokens} context + {target_tokens} target tokens exceed limit {limit}",
        group.map(|g| format!(" in group {g}")).unwrap_or_default()
    )]
    ContextOverflow {
        context_tokens: usize,
        target_tokens: usize,
        limit: usize,
        group: Option<usize>,
    },

    #[error("unsupported capability on backend {backend}: {capability}")]
    UnsupportedCapability { backend: String, capability: String },

    #[error("unconditional log-likelihood {0} is too close to zero for a ratio")]
    DegenerateLL(f64),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("http status {status} after {attempts} attempt(s): {body}")]
    Http {
        status: u16,
        attempts: u32,
        body: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_context_overflow(&self) -> bool {
        matches!(self, Error::ContextOverflow { .. })
    }
}
