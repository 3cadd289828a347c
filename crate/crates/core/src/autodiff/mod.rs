//! Reverse-mode automatic differentiation over dense `f64` tensors, with
//! Adam and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod mlp;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::gradient_check;
pub use graph::{sigmoid, softplus, Gradients, Graph, NodeId, OpKind};
pub use mlp::{mlp_init, Dense, Mlp, MlpVars};
pub use rng::RngStream;
pub use tensor::{log_softmax, log_sum_exp, softmax, Tensor};
