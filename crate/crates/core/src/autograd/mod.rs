//! Reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::gradcheck;
pub use rng::{Rng, RngKind, RngState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
