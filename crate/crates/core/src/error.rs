use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a documented invariant; `field` names the offender.
    #[error("invalid {field}: {message}")]
    Validation { field: &'static str, message: String },

    /// Two grids that must agree in shape do not.
    #[error("dimension mismatch: {context} ({left:?} vs {right:?})")]
    DimMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Input is degenerate for the requested operation (e.g. constant volume).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training-data guard violations (e.g. non-EU subject for an EU-only model).
    #[error("training guard: {0}")]
    Guard(String),

    /// A numeric term became non-finite; names the term.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Checkpoint/model incompatibility.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn validation(field: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            field,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
