use thiserror::Error;

/// Errors produced by the factorization library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("too few observed entries: {observed} observed, at least {required} required for rank {rank}")]
    TooFewObserved {
        observed: usize,
        required: usize,
        rank: usize,
    },

    #[error("penalty too large: lambda * 2 = {0} >= 1")]
    PenaltyTooLarge(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("all {0} restarts failed; last error: {1}")]
    AllRestartsFailed(usize, String),

    #[error("no fit completed for any of the {0} penalty values: {1}")]
    AllCandidatesFailed(usize, String),
}

pub type Result<T> = std::result::Result<T, Error>;
