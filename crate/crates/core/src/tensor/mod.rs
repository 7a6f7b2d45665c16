//! Dense tensors, a reverse-mode tape, and the parameter registry.

pub mod checkpoint;
mod dense;
mod params;
mod tape;

pub use dense::Tensor;
pub use params::{AdamConfig, Parameter, ParameterStore};
pub use tape::{Gradients, Graph, NodeId, SparseMatrix};
