use alloc::string::String;

/// Failure categories surfaced by every fallible operation in the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Malformed or out-of-domain input supplied by the caller.
    #[error("invalid input: {0}")]
    Input(String),
    /// A documented precondition of the operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Statistical estimation is impossible for the supplied data.
    #[error("estimation failed: {0}")]
    Estimation(String),
    /// Numerical breakdown (singular matrix, non-convergence, non-finite values).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A scoring rule cannot be evaluated (e.g. zero predictive density).
    #[error("score undefined: {0}")]
    Score(String),
    /// A random-variate generator cannot produce a draw.
    #[error("sampling failed: {0}")]
    Sampling(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
