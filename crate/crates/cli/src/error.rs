use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// A malformed binary container. Offsets are bytes from the start of the file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unsupported version {found} at byte {offset} (expected {expected})")]
    UnsupportedVersion { offset: usize, expected: u32, found: u32 },
    #[error("truncated at byte {offset}: expected {expected} more bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid record at byte {offset}: {detail}")]
    InvalidRecord { offset: usize, detail: String },
    #[error("{extra} trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] cyclecorr::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("{}:{line}: {source}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("pair {index} ({src} -> {trg}): {source}")]
    Pair {
        index: usize,
        src: String,
        trg: String,
        source: Box<CliError>,
    },
    #[error("{0} self-test checks failed")]
    SelfTest(usize),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 1 for usage and validation failures, 2 for unreadable or unwritable files.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } | Self::Format { .. } | Self::Json { .. } => 2,
            Self::Pair { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
