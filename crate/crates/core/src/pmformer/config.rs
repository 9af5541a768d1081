use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of one partial-multivariate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmformerConfig {
    /// Total number of feature channels `D`.
    pub num_features: usize,
    /// Features per subset `S`, with `1 < S < D`.
    pub subset_size: usize,
    /// Input window length `SL`.
    pub window: usize,
    pub dim: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub dropout: f64,
    pub target_channel: usize,
}

impl Default for PmformerConfig {
    /// BTCUSDT architecture with the default subset size of 4.
    fn default() -> Self {
        Self {
            num_features: 16,
            subset_size: 4,
            window: 48,
            dim: 64,
            heads: 16,
            d_ff: 128,
            layers: 4,
            dropout: 0.7,
            target_channel: crate::indicators::TARGET_CHANNEL,
        }
    }
}

impl PmformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(1 < self.subset_size && self.subset_size < self.num_features) {
            return fail(format!(
                "subset size must satisfy 1 < S < D, got S={} D={}",
                self.subset_size, self.num_features
            ));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.window == 0 || self.d_ff == 0 {
            return fail("window length and d_ff must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.target_channel >= self.num_features {
            return fail(format!(
                "target channel {} out of range for {} features",
                self.target_channel, self.num_features
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}
