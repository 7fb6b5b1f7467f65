use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),

    #[error("data length {got} does not match shape element count {expected}")]
    DataLength { expected: usize, got: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("rollout diverged at time step {step}: non-finite state")]
    DivergedRollout { step: usize },

    #[error("training diverged at epoch {epoch}: {source}")]
    TrainingDiverged {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no candidates: {0}")]
    NoCandidates(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}
