use thiserror::Error;

use crate::validation::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid model specification: {0}")]
    InvalidSpec(ValidationReport),

    #[error("invalid bilinear tensor: {0}")]
    InvalidTensor(ValidationReport),

    #[error("basis scale c_{index} = {value} must be positive")]
    NonPositiveScale { index: usize, value: f64 },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite state at t = {t}: {what}")]
    NonFinite { t: f64, what: String },

    #[error("state already stopped at tau* (t = {t}); caller must not step further")]
    PastStoppingTime { t: f64 },

    #[error("{0}")]
    NotApplicable(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
