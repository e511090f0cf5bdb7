use std::path::PathBuf;

/// Unified error type for the whole pipeline.
///
/// Variants group into the exit-code categories used by the CLI:
/// validation errors exit 2, numeric failures exit 3, I/O and file-format
/// problems exit 4 (usage errors, exit 1, never reach this type).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad inputs: shape mismatches, out-of-range parameters, rejected configs.
    #[error("validation: {0}")]
    Validation(String),

    /// Numeric failure at runtime, e.g. a non-finite training loss.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Filesystem error with the path that triggered it.
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Corrupt or truncated file; reports where decoding went wrong.
    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// JSON that failed to parse or violated the schema.
    #[error("json error in {path}: {detail}")]
    Json { path: PathBuf, detail: String },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Json {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io { .. } | Error::Format { .. } | Error::Json { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
