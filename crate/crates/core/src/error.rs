use thiserror::Error;

/// Errors raised by scene I/O and spatial queries.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// The PLY header does not match the expected 3DGS vertex layout.
    #[error("ply format error: {0}")]
    Format(String),

    /// A vertex carried a NaN or infinite component.
    #[error("non-finite value in field `{field}` at vertex {row}")]
    NonFinite { field: String, row: usize },

    #[error("empty snapshot")]
    EmptySnapshot,

    #[error("empty spatial index")]
    EmptyIndex,

    #[error("invalid k: {0}")]
    InvalidK(String),
}
