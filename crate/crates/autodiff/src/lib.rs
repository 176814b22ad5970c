//! Minimal dense tensors with reverse-mode differentiation.
//!
//! The op set is deliberately small: exactly what the transposed-convolution
//! reconstruction network needs (transposed convolution, 1×1 convolution,
//! batch normalization, ReLU, sigmoid, nearest upsampling, elementwise
//! arithmetic and the three segmentation losses). Every op is checked
//! against central finite differences in 64-bit precision.

mod adam;
mod error;
mod gradcheck;
pub mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use kernels::{BatchStats, ConvTransposeSpec};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tape::{Gradients, NormMode, Tape, Var};
pub use tensor::Tensor;
