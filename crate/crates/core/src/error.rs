use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("trace row {row}: {msg}")]
    Malformed { row: usize, msg: String },
    #[error("trace row {row}: entropy {entropy} is negative")]
    NegativeEntropy { row: usize, entropy: f64 },
    #[error("trace header must be step_index,entropy,accepted")]
    BadHeader,
    #[error("unknown drafting algorithm \"{0}\"")]
    UnknownAlgorithm(String),
    #[error("trace i/o: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimingError {
    #[error("{0} must be at least 1")]
    ZeroDimension(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("batch id {id} is not greater than the newest id {newest}")]
    IdOrder { id: u64, newest: u64 },
    #[error("unknown batch id {0}")]
    UnknownBatch(u64),
    #[error("batch {0} is empty")]
    EmptyBatch(u64),
    #[error("batch {0} cannot be marked for pre-verification")]
    NotPreverifiable(u64),
    #[error("batch {id} starts at {base} but {committed} tokens are committed")]
    BaseMismatch { id: u64, base: u64, committed: u64 },
    #[error("bonus token while speculative batches are live")]
    LiveBatches,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdcError {
    #[error("h_max must be positive, got {0}")]
    NonPositiveHmax(f64),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TvcError {
    #[error("observation length must be at least 1")]
    ZeroLength,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Edc(#[from] EdcError),
    #[error(transparent)]
    Tvc(#[from] TvcError),
    #[error("event cap of {0} exceeded")]
    EventCap(u64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
}
