use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structure mismatch at entry `{entry}`: {reason}")]
    StructureMismatch { entry: String, reason: String },

    #[error("invalid parameter set: {0}")]
    InvalidSet(String),

    #[error("non-finite value in entry `{entry}`")]
    NonFinite { entry: String },

    #[error("non-finite gradient in entry `{entry}`")]
    NonFiniteGrad { entry: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("checkpoint epoch {got} does not follow newest stored epoch {newest}")]
    EpochOrder { newest: u64, got: u64 },

    #[error("internal state error: {0}")]
    InternalState(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty dataset")]
    EmptyData,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {reason}")]
    Parse { row: usize, column: String, reason: String },

    #[error("need {needed} checkpoints, found {found}")]
    InsufficientCheckpoints { needed: usize, found: usize },

    #[error("run aborted at epoch {epoch}: {source}")]
    RunAborted {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(entry: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::StructureMismatch {
            entry: entry.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status: 1 for numerical/internal failures, 2 for
    /// usage, configuration and data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteGrad { .. } | Error::InternalState(_) => 1,
            Error::RunAborted { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
