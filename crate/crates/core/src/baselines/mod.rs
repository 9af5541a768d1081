//! Reference predictors: naive repeat, autoregression and DLinear.

mod ar;
mod dlinear;
mod naive;

pub use ar::{fit_ar, predict_ar, ArModel};
pub use dlinear::{decompose, DlinearConfig, DlinearModel};
pub use naive::{naive_repeat, naive_target_predictions};
