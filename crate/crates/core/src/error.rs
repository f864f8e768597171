use thiserror::Error;

/// Errors surfaced by the numerical core and the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("batch norm used in eval mode before any training step")]
    UninitializedStatistics,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
