use alloc::string::String;

use crate::cache::HeadAddr;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("position {position} does not follow last cached position {last}")]
    NonMonotonePosition { position: usize, last: usize },
    #[error("probabilities sum to {sum}, expected 1")]
    Unnormalized { sum: f64 },
    #[error("cannot evict {requested} of {available} tokens")]
    EvictTooMany { requested: usize, available: usize },
    #[error("every row is masked")]
    AllMasked,
    #[error("token {0} is already selected")]
    AlreadySelected(usize),
    #[error("no query supplied for head {0}")]
    MissingQuery(HeadAddr),
    #[error("step {0} is not present in the trace")]
    MissingStep(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("pipeline phase error: {0}")]
    Phase(&'static str),
}
