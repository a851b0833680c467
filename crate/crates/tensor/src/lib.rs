//! Dense `f64` tensors with a tape-based reverse-mode autodiff engine.
//!
//! The engine covers exactly the operators the condensation networks need:
//! broadcasting arithmetic, matrix products, stride-1 convolutions, 2x2
//! average pooling, nearest-neighbour upsampling, and a few pointwise maps.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod param;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use optim::{clip_scale, grad_norm, LinearDecay, Sgd};
pub use param::{prefixed, Module, Param, ParamId};
pub use tensor::Tensor;
