use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum SbcError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { msg: String, offset: u64 },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SbcError>;
