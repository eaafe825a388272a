//! Dense `f64` tensors, a reverse-mode tape, fully connected networks and Adam.

mod adam;
mod graph;
mod mlp;
mod tensor;

pub use adam::{AdamConfig, AdamState, Direction};
pub use graph::{log_sum_exp, sigmoid, Gradients, Graph, Var};
pub use mlp::{param_count, Activation, Mlp, MlpVars};
pub use tensor::{gemm, Tensor};
