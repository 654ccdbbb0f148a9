//! Dense tensors, probability utilities and reverse-mode gradients.

mod graph;
mod prob;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use prob::{argmax_lowest, kl_divergence, one_hot, softmax, Distribution};
pub use tensor::{matmul, Tensor};

pub(crate) use prob::distribution_from_softmax_row;
