use thiserror::Error;

/// Errors produced by the denoising library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Image sizes, patch dimensions or model dimensions disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A file was readable but its contents are malformed.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Broken internal contract, e.g. a pixel not covered by any patch.
    #[error("internal consistency error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}
