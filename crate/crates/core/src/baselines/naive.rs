use crate::error::{Error, Result};
use crate::market_data::Window;

/// No-change forecasts: the prediction for step `t + 1` is the value at `t`.
pub fn naive_repeat(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyData("naive repeat needs at least one value".into()));
    }
    Ok(values.to_vec())
}

/// Last observed `channel` value of each window, as a forecast of its target row.
pub fn naive_target_predictions(windows: &[Window<'_>], channel: usize) -> Result<Vec<f64>> {
    windows
        .iter()
        .map(|w| {
            let d = w.target.len();
            if channel >= d || w.input.len() < d {
                return Err(Error::InvalidParameter(format!("channel {channel} out of range for {d} features")));
            }
            Ok(w.input[w.input.len() - d + channel])
        })
        .collect()
}
