//! Minimal double-precision tensor engine: dense tensors, a recording graph
//! with reverse-mode differentiation, Adam, gradient checking and
//! checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
