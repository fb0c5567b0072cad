//! Dense f64 tensor engine with tape-based reverse-mode differentiation,
//! gradient checking, an Adam optimizer, and a binary checkpoint container.
//! Covers exactly the operations the sequence models need; every kernel
//! reduces in a fixed order so results are bitwise reproducible.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::AutodiffError;
pub use gradcheck::grad_check;
pub use tape::{gemm_acc, naive_mm_acc, positional_encoding, Tape, Var};
pub use tensor::{stable_sum, Tensor};
