use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor or map shapes; carries the offending extents.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid module or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Misuse of an API contract (e.g. backward from a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Unreadable or malformed input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric(_) | Error::Dimension(_) => 4,
        }
    }
}
