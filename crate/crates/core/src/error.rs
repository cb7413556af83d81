use thiserror::Error;

/// Errors surfaced by the numerical core.
#[derive(Debug, Error)]
pub enum VflError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("kernel singularity: exact kernel evaluated at the origin")]
    Singularity,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical alarm: {0}")]
    Alarm(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, VflError>;
