//! Dense tensors with define-by-run reverse-mode differentiation.

pub mod gradcheck;
mod ops;
mod param;
mod tape;
mod tensor;

pub use ops::{cosine_values, sigmoid, softmax_values};
pub use param::{FrozenWeight, Parameter};
pub use tape::{Activation, BinaryKind, Gradients, Tape, Var};
pub use tensor::Tensor;
