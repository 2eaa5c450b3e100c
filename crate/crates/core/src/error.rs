use thiserror::Error;

/// Errors produced by the diffusion engine, objectives and oracles.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("estimator degenerate: {0}")]
    Degenerate(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("divergence is infinite: {0}")]
    Support(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("empty buffer")]
    EmptyBuffer,
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
