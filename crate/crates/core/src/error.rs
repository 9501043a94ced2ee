use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// A diverged learning update. Carries enough context to locate the
    /// offending step in a multi-million-step run.
    #[error("numeric fault at step {step}: {detail}")]
    NumericFault { step: u64, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes in stream file {path}")]
    BadMagic { path: PathBuf },

    #[error("unsupported stream format version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("truncated stream file {path}: expected {expected} record bytes, found {found}")]
    TruncatedStream {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("stream width mismatch: file declares {header}, caller expects {expected}")]
    WidthMismatch { header: usize, expected: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
