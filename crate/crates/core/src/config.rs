//! File-driven run configuration with the bundled per-asset presets.
//!
//! Model keys follow the hyperparameter tables: `LR` (absolute), `BS`, `SL`,
//! `LL`, `e`, `d`, `Dim`, `H`, `d_ff` and `D` (dropout), plus `S` for the
//! subset size.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::DlinearConfig;
use crate::error::{Error, Result};
use crate::pmformer::PmformerConfig;
use crate::training::{TrainConfig, DEFAULT_ENSEMBLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Pmformer,
    Naive,
    Ar,
    Dlinear,
}

impl ModelKind {
    pub fn is_trained(self) -> bool {
        matches!(self, ModelKind::Pmformer | ModelKind::Dlinear)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pmformer" => Ok(ModelKind::Pmformer),
            "naive" => Ok(ModelKind::Naive),
            "ar" | "arima" => Ok(ModelKind::Ar),
            "dlinear" => Ok(ModelKind::Dlinear),
            _ => Err(Error::Config(format!(
                "unknown model kind {s:?} (expected pmformer, naive, ar or dlinear)"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Pmformer => "pmformer",
            ModelKind::Naive => "naive",
            ModelKind::Ar => "ar",
            ModelKind::Dlinear => "dlinear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub model: String,
    #[serde(default = "default_asset")]
    pub asset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Per-side transaction cost as a fraction of equity.
    #[serde(default)]
    pub cost_per_side: f64,
}

fn default_asset() -> String {
    "BTCUSDT".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(rename = "LR")]
    pub lr: f64,
    #[serde(rename = "BS")]
    pub batch_size: usize,
    #[serde(rename = "SL")]
    pub window: usize,
    /// Label length; the encoder-only model has no decoder to feed it.
    #[serde(rename = "LL")]
    pub label_len: usize,
    #[serde(rename = "e")]
    pub encoder_layers: usize,
    /// Decoder layers; unused by the encoder-only model.
    #[serde(rename = "d")]
    pub decoder_layers: usize,
    #[serde(rename = "Dim")]
    pub dim: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub d_ff: usize,
    #[serde(rename = "D")]
    pub dropout: f64,
    #[serde(rename = "S")]
    pub subset_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            lr: 1.06e-4,
            batch_size: 128,
            window: 48,
            label_len: 12,
            encoder_layers: 4,
            decoder_layers: 3,
            dim: 64,
            heads: 16,
            d_ff: 128,
            dropout: 0.7,
            subset_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub ensemble: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 10,
            seeds: vec![42, 1337, 2025],
            ensemble: DEFAULT_ENSEMBLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArSection {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl Default for ArSection {
    fn default() -> Self {
        Self { p: 2, d: 0, q: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlinearSection {
    pub individual: bool,
    pub moving_avg: usize,
}

impl Default for DlinearSection {
    fn default() -> Self {
        Self {
            individual: true,
            moving_avg: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ar: ArSection,
    #[serde(default)]
    pub dlinear: DlinearSection,
}

/// Names of the bundled presets.
pub const PRESETS: [&str; 7] = [
    "btc_pmformer",
    "eth_pmformer",
    "btc_ar",
    "eth_ar",
    "btc_dlinear",
    "eth_dlinear",
    "naive",
];

fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "btc_pmformer" => include_str!("../presets/btc_pmformer.toml"),
        "eth_pmformer" => include_str!("../presets/eth_pmformer.toml"),
        "btc_ar" => include_str!("../presets/btc_ar.toml"),
        "eth_ar" => include_str!("../presets/eth_ar.toml"),
        "btc_dlinear" => include_str!("../presets/btc_dlinear.toml"),
        "eth_dlinear" => include_str!("../presets/eth_dlinear.toml"),
        "naive" => include_str!("../presets/naive.toml"),
        _ => return None,
    })
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; a bare preset name is also accepted.
    pub fn load(path_or_preset: &str) -> Result<Self> {
        let path = Path::new(path_or_preset);
        if !path.exists() {
            if let Some(text) = preset_text(path_or_preset) {
                return Self::from_toml_str(text);
            }
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = preset_text(name).ok_or_else(|| {
            Error::Config(format!("unknown preset {name:?} (available: {})", PRESETS.join(", ")))
        })?;
        Self::from_toml_str(text)
    }

    /// The resolved configuration as TOML, written next to every output.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn kind(&self) -> Result<ModelKind> {
        self.run.model.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind()?;
        let m = &self.model;
        if m.window == 0 {
            return Err(Error::Config("SL must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.run.cost_per_side) {
            return Err(Error::Config(format!("cost_per_side must be in [0, 1), got {}", self.run.cost_per_side)));
        }
        match kind {
            ModelKind::Pmformer | ModelKind::Dlinear => {
                self.train_config().validate()?;
            }
            ModelKind::Ar => {
                if self.ar.p == 0 {
                    return Err(Error::Config("ar.p must be >= 1".into()));
                }
                if self.ar.q != 0 {
                    return Err(Error::Config(format!(
                        "ar.q = {} requested, but moving-average terms are not supported",
                        self.ar.q
                    )));
                }
            }
            ModelKind::Naive => {}
        }
        if kind == ModelKind::Pmformer && m.label_len >= m.window {
            log::warn!("LL = {} is not shorter than SL = {}", m.label_len, m.window);
        }
        Ok(())
    }

    /// Replaces the seed list with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seeds = vec![seed];
        self
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.model.lr,
            batch_size: self.model.batch_size,
            epochs: self.train.epochs,
            patience: self.train.patience,
            seeds: self.train.seeds.clone(),
            ensemble: self.train.ensemble,
        }
    }

    pub fn pmformer_config(&self, num_features: usize, target_channel: usize) -> PmformerConfig {
        let m = &self.model;
        if m.label_len != 0 || m.decoder_layers != 0 {
            log::debug!("LL and d are recorded but unused by the encoder-only model");
        }
        PmformerConfig {
            num_features,
            subset_size: m.subset_size,
            window: m.window,
            dim: m.dim,
            heads: m.heads,
            d_ff: m.d_ff,
            layers: m.encoder_layers,
            dropout: m.dropout,
            target_channel,
        }
    }

    pub fn dlinear_config(&self, channels: usize, target_channel: usize) -> DlinearConfig {
        DlinearConfig {
            channels,
            window: self.model.window,
            moving_avg: self.dlinear.moving_avg.min(self.model.window),
            individual: self.dlinear.individual,
            target_channel,
        }
    }
}
