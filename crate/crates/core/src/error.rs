use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("corpus line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code convention: 2 usage/config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Record { .. } | Error::NotFound(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) | Error::Json(_) => 3,
        }
    }
}
