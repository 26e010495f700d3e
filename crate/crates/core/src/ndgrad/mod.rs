//! Dense `f64` tensors with a define-by-run reverse-mode autodiff graph.
//!
//! A [`Graph`] is built for one forward pass and dropped after [`Graph::backward`].
//! Trainable tensors live in a [`ParamStore`]; binding one into a graph with
//! [`Graph::param`] creates a leaf that receives gradients.

mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, PoolKind, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
