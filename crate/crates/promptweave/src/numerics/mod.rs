//! Scalar-generic dense tensors, RNG, reverse-mode autodiff, and gradient
//! checking.

pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{NodeId, ParamId, ParamStore, Tape};
pub use tensor::{Tensor, TensorError};
