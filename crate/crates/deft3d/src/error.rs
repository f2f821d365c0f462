use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("state error: {0}")]
    State(String),
    #[error("tensor file format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("training diverged at iteration {iter}: {msg}")]
    Diverged { iter: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
