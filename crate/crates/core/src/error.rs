use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("enumeration of {requested} sequences exceeds the cap of {cap}")]
    EnumerationCap { requested: u128, cap: u64 },
    #[error("distributions are defined over different supports")]
    SupportMismatch,
    #[error("zero mass in the second argument where the first has mass {0}")]
    ZeroSupport(f64),
    #[error("missing frozen student likelihood for trajectory {0}")]
    MissingFrozen(usize),
    #[error("degenerate E-step batch: {positives} positives, {negatives} negatives")]
    DegenerateBatch { positives: usize, negatives: usize },
    #[error("trajectory {0} has no feedback")]
    MissingFeedback(usize),
    #[error("malformed snapshot: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
