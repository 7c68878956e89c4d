//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors.
//!
//! The tape ([`Graph`]) is rebuilt for every forward pass. Parameters enter
//! as shared leaves so building a graph never copies weights.

pub mod check;
pub mod conv;
mod error;
pub mod graph;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Unary, Var};
pub use scalar::{gemm, MatRef, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
