use alloc::string::String;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Inputs that violate a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Basis/sample configuration that cannot be evaluated or is not identified.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric overflow in phi at (i={i}, j={j}, k={k})")]
    NonFinitePhi { i: usize, j: usize, k: usize },

    #[error("potential solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("linear system is singular or badly conditioned (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::Invalid(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use invalid;
