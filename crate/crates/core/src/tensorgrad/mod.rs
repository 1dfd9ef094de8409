//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the operators the density networks need are provided: strided
//! convolution, transposed convolution, ReLU/sigmoid, global average
//! pooling, affine layers, elementwise arithmetic and a few fused losses.

mod conv;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport, Worst};
pub use graph::{sigmoid, Activation, CustomRule, Gradients, Graph, NodeId};
pub use optim::Adam;
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
