use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or volume extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN/Inf where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke an API precondition (non-scalar loss, missing grid, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or truncated binary file.
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Contract(_)
                | Error::Config(_)
                | Error::Format(_)
                | Error::UnsupportedVersion { .. }
                | Error::Validation(_)
                | Error::Json(_)
        )
    }
}
