use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or extents (e.g. matmul inner dims disagree).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration (even kernel, stride schedule not reaching 1, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A forward op produced or received a non-finite value.
    #[error("numeric error in {scope}: {detail}")]
    Numeric { scope: String, detail: String },

    /// Malformed file: bad magic, unsupported version, checksum mismatch, truncation.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(scope: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { scope: scope.into(), detail: detail.into() }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
