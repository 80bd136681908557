use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: axis {axis} expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("unknown op tag `{0}`")]
    UnknownOp(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("model file: {0}")]
    Model(String),

    #[error("training diverged at epoch {epoch} (loss trace: {trace:?})")]
    Divergence { epoch: usize, trace: Vec<f64> },

    #[error("solver produced a non-finite loss at Gauss-Newton step {step} (trace: {trace:?})")]
    SolverNonFinite { step: usize, trace: Vec<f64> },
}

impl Error {
    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure is caused by user input (bad files, flags,
    /// specs) rather than a numerical or internal fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::SolverNonFinite { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
