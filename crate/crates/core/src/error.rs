use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: {observed} observations, need {required}")]
    InsufficientData { observed: usize, required: usize },

    #[error("format error at line {line}: {message}")]
    Format { line: u64, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(line: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            line,
            message: msg.into(),
        }
    }

    /// Stable, machine-readable class name used by the CLI and the advisory protocol.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::InsufficientData { .. } => "insufficient-data",
            Error::Format { .. } => "format",
            Error::Protocol(_) => "protocol",
            Error::NotFound(_) => "not-found",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
