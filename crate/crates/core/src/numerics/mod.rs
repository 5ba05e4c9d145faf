//! Tensor and reverse-mode differentiation substrate, Adam, losses and
//! checkpoint persistence.

mod adam;
pub mod checkpoint;
mod graph;
pub mod init;
pub mod loss;
mod param;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use graph::{grad, BatchStats, Conv2dSpec, Grads, Graph, Var};
pub use param::{Bound, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::{softmax, Tensor};
