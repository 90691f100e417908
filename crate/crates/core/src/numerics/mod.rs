//! Dense tensors, reverse-mode gradients and the AdamW optimizer.

mod gemm;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use graph::{softmax_in_place, AttentionLayout, Gradients, Graph, Var};
pub use optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
pub use tensor::Tensor;
