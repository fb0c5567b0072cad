use thiserror::Error;

/// Errors raised by gradient checking and checkpoint I/O.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint bytes do not match the container format.
    #[error("checkpoint format error: {0}")]
    Format(String),

    /// The function under test produced NaN or infinity.
    #[error("non-finite value during {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
