use mstop_numkit::{CheckpointError, NumError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("node reference out of range: {0}")]
    InvalidReference(String),
    #[error("invalid vehicle order {order:?} for {k} vehicles")]
    InvalidOrder { order: Vec<usize>, k: usize },
    #[error("action {action} is infeasible for vehicle {vehicle}")]
    Infeasible { action: usize, vehicle: usize },
    #[error("state is terminal")]
    Terminal,
    #[error("trajectory is not terminal")]
    NotTerminal,
    #[error("instance too large for {solver}: n = {n} exceeds {limit}")]
    TooLarge { solver: &'static str, n: usize, limit: usize },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },
    #[error("dataset line {line}: version {found} is not supported (expected {expected})")]
    DatasetVersion { line: usize, found: u32, expected: u32 },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, CoreError>;
