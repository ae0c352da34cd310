use std::path::PathBuf;

/// Errors raised by the auditing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    /// Input data violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An argument is outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    /// Training diverged or a numeric routine could not produce a value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate ROC: {0}")]
    DegenerateRoc(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad category used by the CLI to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Usage,
            Error::Parse { .. } | Error::Validation(_) | Error::Capacity(_) => ErrorKind::Data,
            Error::Numeric(_) | Error::DegenerateRoc(_) | Error::DegenerateEmbedding(_) => {
                ErrorKind::Numeric
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}
