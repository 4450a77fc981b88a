use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing modality {0}")]
    MissingModality(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("too few cases: {cases} case(s) cannot be split into {k} folds")]
    TooFewCases { cases: usize, k: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("non-finite loss term `{term}` ({context})")]
    NonFiniteLoss { term: String, context: String },

    #[error("unknown ablation tag `{0}` (valid: BL1, BL2, BL3, BL4, BL5, BL6, BL7, PROPOSED)")]
    UnknownTag(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidConfig(_) | Error::UnknownTag(_) => 2,
            Error::NonFiniteLoss { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn unreadable(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::UnreadableFile {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
