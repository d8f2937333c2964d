//! Dense `f64` tensors with a tape-based reverse-mode autodiff engine.
//!
//! The op set is deliberately small: convolutions, pooling, softmax,
//! elementwise arithmetic, resizing and the few fused reductions (cosine
//! similarity, binary cross-entropy, group normalization) the change
//! detection model needs. Every op is covered by [`suite::registered_ops`],
//! which checks analytic gradients against central differences.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
pub mod suite;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamReport};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use kernels::ResizeMode;
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
