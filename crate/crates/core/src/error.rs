use thiserror::Error;

/// Errors raised by the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("no weight updates to aggregate")]
    EmptyUpdates,
    #[error("distillation set is empty")]
    EmptyDistillSet,
    #[error("outdated CSI pool is empty")]
    EmptyPool,
    #[error("cache is empty")]
    EmptyCache,
    #[error("trimmed mean needs 2a < N (a = {trim}, N = {count})")]
    TrimTooLarge { trim: usize, count: usize },
    #[error("non-finite weight at update {update}, coordinate {coord}")]
    NonFiniteWeight { update: usize, coord: usize },
    #[error("aggregate from {aggregator} is non-finite at coordinate {coord}")]
    NonFiniteAggregate { aggregator: String, coord: usize },
    #[error("loss location must be positive, got {0}")]
    DegenerateScale(f64),
    #[error("invalid SBS id {sbs_id} (have {count} caches)")]
    InvalidSbs { sbs_id: usize, count: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
