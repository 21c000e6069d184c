//! Reverse-mode differentiation over dense `f64` tensors, a parameter store
//! split into shared and per-series partitions, and an Adam optimizer.

mod graph;
pub mod nn;
mod params;
mod tensor;

pub use graph::{ConvSpec, Gradients, Graph, OpKind, Padding, Var};
pub use params::{Parameter, ParameterStore, Partition, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::Tensor;
