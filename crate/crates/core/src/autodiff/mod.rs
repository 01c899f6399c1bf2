//! Reverse-mode automatic differentiation over dense tensors.

mod activation;
mod float;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use activation::{sigmoid, GateActivation, LEAKY_RELU_SLOPE};
pub use float::Float;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
