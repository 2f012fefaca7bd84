use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dqrm_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: u64, reason: String },
    #[error("model file: {0}")]
    Format(#[from] FormatError),
    #[error("config: {0}")]
    Config(String),
    #[error("metrics log: {0}")]
    Log(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic (not a model file)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

/// Process exit status for an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Data = 3,
    Diverged = 4,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_kind(&self) -> ExitKind {
        use dqrm_core::Error as C;
        match self {
            Error::Config(_) => ExitKind::Config,
            Error::Core(C::Config(_) | C::UnsupportedBits(_)) => ExitKind::Config,
            Error::Core(C::Diverged | C::NonFinite) => ExitKind::Diverged,
            _ => ExitKind::Data,
        }
    }
}
