//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape: every primitive evaluates its value
//! eagerly and records its operands, so node ids are already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Gradients are
//! produced for every node reachable from the root, leaves included, which
//! is what makes input saliency available.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
