//! Partial-multivariate transformer forecasting for daily crypto returns,
//! with the feature pipeline, baselines, training loop and sign-rule
//! backtest used to evaluate it.

pub mod autograd;
pub mod backtest;
pub mod baselines;
pub mod config;
pub mod error;
pub mod indicators;
pub mod market_data;
pub mod pipeline;
pub mod pmformer;
pub mod training;

pub use error::{Error, ErrorClass, Result};
