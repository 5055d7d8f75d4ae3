//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Gradients are graph nodes, so anything computed from a gradient (for
//! example a flow step that kicks the velocity by `∇ log p`) can be
//! differentiated again with respect to the model parameters.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{BoundParams, ParamSet};
pub use tensor::Tensor;
