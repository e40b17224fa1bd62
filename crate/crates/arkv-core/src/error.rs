//! Error types shared across the cache engine and the model.

use thiserror::Error;

/// Errors raised by cache, scoring, tailor, and model operations.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A token was appended out of order or with a duplicate position.
    #[error("non-monotonic append: expected position {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    /// The observation window does not fit the attention tensor.
    #[error("window {window} too large for attention with {queries} queries and {keys} keys")]
    WindowTooLarge {
        window: usize,
        queries: usize,
        keys: usize,
    },

    /// An attention slice carried no mass, so no key distribution exists.
    #[error("degenerate attention window: all weights are zero")]
    DegenerateDistribution,

    /// Invalid configuration (budget, window, model shape).
    #[error("configuration error: {0}")]
    Config(String),

    /// A plan or cache violated an internal structural invariant.
    #[error("cache integrity error: {0}")]
    Integrity(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: non-finite value in {0}")]
    NonFinite(&'static str),

    /// Out-of-range argument to an operation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Prompt or generation would exceed the model's maximum sequence length.
    #[error("sequence length {got} exceeds max_seq_len {max}")]
    LengthExceeded { got: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, CoreError>;
