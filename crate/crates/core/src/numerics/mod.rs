//! Dense tensors, reverse-mode differentiation and the seeded random source
//! underneath every model computation. All arithmetic is `f64`.

pub mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use rng::Rng;
pub use tape::{gelu_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;
