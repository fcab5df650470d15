//! Crate-wide error type and exit-code mapping used by the CLI.

/// Unified error for data loading, configuration, shape checking and numeric
/// failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed on-disk data: bad magic, truncated file, inconsistent
    /// header fields.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid configuration values or unusable combinations of options.
    #[error("config error: {0}")]
    Config(String),

    /// Inputs that fail validation (zero feature rows, missing labels,
    /// mismatched lengths, shape mismatches).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Numeric failure at run time, e.g. non-finite gradients.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code for this error: 1 for validation-type failures,
    /// 2 for runtime numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
