//! Minimal dense reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Primitive, Var};
pub use tensor::Tensor;
