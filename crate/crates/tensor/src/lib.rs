//! Dense tensors with a recording tape for reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] through [`Var`] handles. The engine is generic over the element
//! type so the same operators run in `f32` for training and in `f64` for
//! gradient checking.

mod adam;
mod conv;
mod error;
pub mod gradcheck;
mod norm;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamState};
pub use conv::conv_output_size;
pub use error::{Result, TensorError};
pub use norm::{BatchNorm2d, BatchStats, BnMode};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
