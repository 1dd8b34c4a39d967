use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("lane coordinate out of range: {0}")]
    OutOfRange(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("spawn failed: {0}")]
    Spawn(String),
    #[error("episode already finished; call reset")]
    EpisodeDone,
    #[error("input width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("empty share group {0}")]
    EmptyGroup(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged: non-finite loss {0}")]
    Diverged(f64),
    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("goal node {goal} unreachable from {start}")]
    Unreachable { start: usize, goal: usize },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
