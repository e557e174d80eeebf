use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at batch index {batch_index}")]
    NonFiniteLoss { batch_index: usize },

    #[error("ODE solver failed at t = {t}: {reason}")]
    Solver { t: f64, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("checksum mismatch in {path}")]
    Checksum { path: PathBuf },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("output {0} already exists (pass --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code: 2 config error, 3 data error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::OutputExists(_) => 2,
            Error::DimensionMismatch { .. }
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Format { .. }
            | Error::MissingFile(_)
            | Error::Io { .. } => 3,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::Solver { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
