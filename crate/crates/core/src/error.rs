use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("unsupported schema version `{found}`, expected `{expected}`")]
    Version { found: String, expected: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("sampler gave up after {0} attempts")]
    SamplerExhausted(usize),

    #[error("certification failed: {0}")]
    Certification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
