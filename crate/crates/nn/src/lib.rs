//! Small CPU tensor engine used by the localization encoders.
//!
//! Only what the two encoder pipelines need is here: strided convolution,
//! max pooling, nearest upsampling, global pooling, cell gathering, linear
//! layers, row-wise L2 normalization and Adam. Everything is generic over
//! [`Scalar`] so the same model code runs in `f32` for training and `f64`
//! for finite-difference checks.

mod adam;
mod graph;
mod param;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use param::{Grads, Param, ParamId, ParamSet};
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;
