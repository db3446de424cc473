use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    /// A linear system or QP could not be solved even after the ridge fallback.
    #[error("ill-conditioned system: {0}; consider increasing the ridge or the weight floor")]
    Conditioning(String),

    /// Division by a mixing weight that is (numerically) zero.
    #[error("weight {index} = {value:e} is below the division guard; use a positive weight floor (warm-up schedule) to keep components alive")]
    GuardedDivision { index: usize, value: f64 },

    #[error("unsupported order d = {0} (maximum supported order is {max})", max = crate::MAX_ORDER)]
    UnsupportedOrder(usize),

    #[error("validation error: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, MomError>;
