use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("loss memory holds {have} samples, measurer needs {need}")]
    InsufficientHistory { have: usize, need: usize },

    #[error("older-window weighted loss sum is zero")]
    DegenerateDenominator,

    #[error("adaptive weight became non-positive (W_m={w_m}, W_I={w_i})")]
    NonPositiveWeight { w_m: f64, w_i: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Holds the 0-based index of the last task; the message is 1-based.
    #[error("no task after task {}", .0 + 1)]
    NoNextTask(usize),

    #[error("no unknown ground truth in the evaluation set")]
    NoUnknownGt,

    #[error("detector never reaches recall {0}")]
    UnreachableRecall(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::NoNextTask(_) => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}
