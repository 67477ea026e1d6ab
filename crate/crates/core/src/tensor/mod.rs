//! Dense tensors and the differentiation tape.

mod graph;
pub(crate) mod kernels;
mod value;

pub use graph::{Activation, Gradients, Graph, Var};
pub use value::Tensor;
