use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical consistency: imaginary residue {residue:.3e} exceeds {threshold:.0e}")]
    NumericalConsistency { residue: f64, threshold: f64 },

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("category expansion failed for `{target}`: {reason}")]
    Expansion { target: String, reason: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    /// Validation-class failures (bad config, bad arguments) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::InvalidInput(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
