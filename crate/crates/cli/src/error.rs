use std::path::PathBuf;

use thiserror::Error;

/// Pipeline-level failures. Every variant renders as a single line so the
/// CLI can report `error: <reason>` and exit nonzero.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tsnca_core::Error),

    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint {path} has a bad magic header (expected TSNCAv01)")]
    BadMagic { path: PathBuf },

    #[error("checkpoint {path} is truncated while reading {context}")]
    Truncated { path: PathBuf, context: String },

    #[error("checkpoint fingerprint mismatch: expected `{expected}`, found `{found}`")]
    FingerprintMismatch { expected: String, found: String },

    #[error("malformed fingerprint `{0}`")]
    MalformedFingerprint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: non-finite loss ({detail})")]
    NanLoss { step: u64, detail: String },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
