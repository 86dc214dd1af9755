use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape mismatch, untrained step, bad parameter).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Euler simulation produced a non-finite state.
    #[error("simulation produced a non-finite state at step {step}")]
    Simulation { step: usize },

    /// An oracle needed the closed-form solution but the problem does not carry one.
    #[error("problem has no exact solution: {0}")]
    MissingExact(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
