//! Reverse-mode differentiation over a fixed set of dense tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! a node holding its output, so every input precedes its consumers and one
//! reverse sweep in [`Graph::backward`] visits nodes in a valid order.

mod conv;
mod graph;

pub use conv::ConvGeometry;
pub use graph::{BinaryKind, Graph, UnaryKind, Var, BCE_EPS};
