//! Dense `f32` tensors with a reverse-mode tape.
//!
//! All floating-point behavior of the crate goes through here: reductions
//! (dot products, means, variances) accumulate in `f64` and round once.

mod adam;
mod graph;
mod tensor;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use graph::{softmax_vec, Graph, NodeRecord, OpKind, Var, IGNORE_INDEX, MASK_NEG};
pub use tensor::Tensor;
