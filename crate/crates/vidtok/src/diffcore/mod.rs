//! Minimal dense-tensor reverse-mode differentiation engine.
//!
//! Supplies exactly the operations the tokenizer needs. Graph construction
//! and backward are single-threaded; all kernels use a fixed reduction
//! order, so results are bit-identical run to run.

mod adamw;
mod gradcheck;
mod graph;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::grad_check;
pub use graph::{multi_head_attention, split_axis, AxisQuery, BilinQuery, Graph, Var};
pub use tensor::Tensor;
