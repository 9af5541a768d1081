//! The partial-multivariate forecasting model.

mod config;
mod model;

pub use config::PmformerConfig;
pub use model::{draw_target_subset, Bound, Pass, Pmformer};
