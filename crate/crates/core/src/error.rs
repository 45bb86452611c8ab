//! Error taxonomy shared by the library and the command-line tool.

/// Library-wide error type. The three variants map onto the CLI exit codes:
/// config 1, data 2, numeric 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad shapes, inconsistent plans, missing paths.
    #[error("config error: {0}")]
    Config(String),
    /// Invalid or missing input data.
    #[error("data error: {0}")]
    Data(String),
    /// Numeric failure: non-finite values, undefined statistics.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
