use thiserror::Error;

/// Errors raised by the streaming test and its building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid observation: {0} is not finite")]
    InvalidObservation(f64),
    #[error("randomizer {0} is outside the open unit interval")]
    InvalidRandomizer(f64),
    #[error("rank {0} is outside [0, 1]")]
    InvalidRank(f64),
    #[error("ties present: {0}")]
    TiesPresent(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid rectangle: {0}")]
    InvalidRectangle(String),
    #[error("invalid depth: {0}")]
    InvalidDepth(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("session already stopped at n = {0}")]
    ObserveAfterStop(u64),
    #[error("snapshot version {found} is not supported (expected {expected})")]
    SnapshotVersion { found: u32, expected: u32 },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("unknown scenario: {0}")]
    UnknownScenario(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
}

pub type Result<T> = std::result::Result<T, Error>;
