use thiserror::Error;

/// Errors raised by the library. Variants follow the failure classes callers
/// need to distinguish: bad arguments, geometric mismatches, bandwidths that
/// leave the valid regime, and solver limits.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("manifold mismatch: {0}")]
    ManifoldMismatch(String),
    #[error("bandwidth too large: {0}")]
    BandwidthTooLarge(String),
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("cannot parse '{input}': {reason}")]
    Parse { input: String, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

pub(crate) fn parse_err(input: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        input: input.to_string(),
        reason: reason.into(),
    }
}
