use thiserror::Error;

use crate::mlmc::MlmcResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A scheme produced a NaN or infinite state.
    #[error("numerical failure at level {level}, step {step}: non-finite state")]
    NumericalFailure { level: u32, step: usize },

    /// The adaptive estimator hit its maximal level without meeting the bias test.
    /// The partial result is kept so callers can still inspect it.
    #[error("no bias convergence up to level {max_level}")]
    NonConvergence {
        max_level: u32,
        partial: Box<MlmcResult>,
    },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
