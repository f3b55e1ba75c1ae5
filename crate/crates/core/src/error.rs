use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
