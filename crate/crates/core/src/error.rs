use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library. Stage-level failures in the EM loop are
/// wrapped in [`Error::Stage`] so callers can tell which step broke.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {0}: must be > 0")]
    InvalidDepth(f64),
    #[error("degenerate homography warp: |w| = {0:e}")]
    DegenerateWarp(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("coverage unreachable after {attempts} attempts (best {best:.3}, need {required:.3})")]
    CoverageUnreachable {
        attempts: usize,
        best: f64,
        required: f64,
    },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint architecture mismatch: expected `{expected}`, found `{found}`")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("stage `{stage}` failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
