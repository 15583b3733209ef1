use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    CorpusEmpty,

    #[error("unknown token at position {position}")]
    UnknownToken { position: usize },

    #[error("state is terminal; no next-token distribution")]
    TerminalState,

    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),

    #[error("invalid filter: {0}")]
    InvalidFilter(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("remote endpoint unavailable after {attempts} attempt(s): {last_error}")]
    RemoteUnavailable { attempts: u32, last_error: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid critic: {0}")]
    InvalidCritic(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("search space too large: {size:.3e} candidates exceeds the guard of {guard}")]
    SpaceTooLarge { size: f64, guard: u64 },

    #[error("unsupported format_version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("failed to write report {path}: {source}")]
    ReportWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
