//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the pipeline, grouped so callers (the CLI in
/// particular) can map them to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or invalid arguments to an operation.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset / file-format problems.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("hash mismatch for {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },

    #[error("format version mismatch in {path}: found {found}, supported {supported}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Numerical failures (NaN loss, CG divergence).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Caller bugs: unknown ids, dimension mismatches.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Exit-code class of the error: 2 config, 3 data, 4 numerical, 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. }
            | Error::HashMismatch { .. }
            | Error::MissingFile { .. }
            | Error::VersionMismatch { .. }
            | Error::Format { .. } => 3,
            Error::Numerical(_) => 4,
            Error::InvalidArgument(_) => 5,
        }
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::MissingFile { .. } => "missing_file",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Format { .. } => "format",
            Error::Numerical(_) => "numerical",
            Error::InvalidArgument(_) => "invalid_argument",
        }
    }
}
