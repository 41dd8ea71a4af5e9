use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate density: {0}")]
    DegenerateDensity(String),
    #[error("unsupported family: {0}")]
    UnsupportedFamily(String),
    #[error("non-finite objective at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("sampler diagnostic: {0}")]
    Sampler(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
