//! Dense tensors, categorical distributions and reverse-mode differentiation.

pub mod distribution;
pub mod graph;
pub mod tensor;

pub use distribution::{argmax, cross_entropy, kl_divergence, softmax, Distribution, PROB_FLOOR};
pub use graph::{AttnShape, Gradients, Graph, Var};
pub use tensor::{matmul, Tensor};
