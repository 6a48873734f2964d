//! Dense tensors, forward kernels and the reverse-mode tape.

mod graph;
pub mod ops;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use ops::Activation;
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
