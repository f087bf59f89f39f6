use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("negative stress cycle count {0}")]
    NegativeCycles(i64),

    #[error("search grid is empty")]
    EmptyGrid,

    #[error("no uniform reference ladder separates the noiseless levels")]
    IdealInfeasible,

    #[error("rank-deficient design: cells {cells:?} are not identifiable")]
    RankDeficient { cells: Vec<usize> },

    #[error("scope unit {unit} has no programmed-{bit} cells")]
    EmptyPopulation { unit: String, bit: u8 },

    #[error("no noise profile for scope unit {0}")]
    MissingProfile(String),

    #[error("non-finite weight at index {0}")]
    NonFiniteWeight(usize),

    #[error("episode already finished")]
    EpisodeDone,

    #[error("bad container {path:?}: {reason}")]
    Format { path: Option<PathBuf>, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("artifact kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("stage {stage} failed: {reason}")]
    StageFailed { stage: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    pub(crate) fn format(reason: impl Into<String>) -> Self {
        Error::Format { path: None, reason: reason.into() }
    }
}
