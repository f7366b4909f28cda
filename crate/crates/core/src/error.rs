use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed document at {at}: {message}")]
    MalformedDocument { at: String, message: String },

    #[error("schema violation at {at}: {message}")]
    SchemaViolation { at: String, message: String },

    #[error("invariant violation at {at}: {message}")]
    InvariantViolation { at: String, message: String },

    #[error("i/o failure on {}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset contains no expressions")]
    EmptyDataset,

    #[error("duplicate prediction for expression '{0}'")]
    DuplicatePrediction(String),

    #[error("prediction references unknown expression '{0}'")]
    UnknownExpression(String),

    #[error("exhaustive matcher supports at most {limit} instances per side, got {preds} predictions and {gts} ground-truth boxes")]
    InstanceLimitExceeded { preds: usize, gts: usize, limit: usize },

    #[error("tally is empty")]
    EmptyTally,

    #[error("no no-target expressions to evaluate")]
    NoNegativeSamples,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("count bin {0} is outside 0..=4")]
    BinOutOfRange(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("scene has {objects} objects but only {slots} query slots")]
    TooManyObjects { objects: usize, slots: usize },

    #[error("training diverged in stage {stage}, epoch {epoch}: loss is not finite")]
    DivergenceDetected { stage: u8, epoch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad input files or arguments.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MalformedDocument { .. }
                | Error::SchemaViolation { .. }
                | Error::InvariantViolation { .. }
                | Error::EmptyDataset
                | Error::DuplicatePrediction(_)
                | Error::UnknownExpression(_)
                | Error::InvalidConfig(_)
                | Error::InstanceLimitExceeded { .. }
                | Error::NoNegativeSamples
                | Error::TooManyObjects { .. }
                | Error::Checkpoint(_)
        )
    }
}
