use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("tape: {0}")]
    Tape(String),

    #[error("capacity: requested {requested} distinct scenes but only {available} exist")]
    Capacity { requested: u64, available: u64 },

    #[error("format version mismatch: file has {found}, expected {expected}")]
    Version { found: String, expected: String },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (batch ids {batch:?})")]
    Diverged { step: usize, batch: Vec<u64> },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite { .. } | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
