//! Minimal reverse-mode differentiation for small dense networks.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Graph, NodeId, Op, LEAKY_SLOPE, LOG_FLOOR};
pub use tensor::Tensor;
