//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Every model forward pass and loss is recorded on a [`Graph`]; calling
//! [`Graph::backward`] on a scalar node yields gradients for all trainable
//! leaves. Matrix products go through `matrixmultiply` and are single
//! threaded, so results are bit-reproducible on a given platform.

mod graph;
mod tensor;

pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use tensor::{Real, Tensor};
