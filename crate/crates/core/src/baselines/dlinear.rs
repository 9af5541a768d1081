use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::market_data::Window;
use crate::training::Trainable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlinearConfig {
    pub channels: usize,
    pub window: usize,
    pub moving_avg: usize,
    /// Separate linear maps per channel when true, one shared map otherwise.
    pub individual: bool,
    pub target_channel: usize,
}

impl Default for DlinearConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            window: 48,
            moving_avg: 25,
            individual: true,
            target_channel: crate::indicators::TARGET_CHANNEL,
        }
    }
}

impl DlinearConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.window == 0 {
            return Err(Error::Config("DLinear needs at least one channel and window step".into()));
        }
        if self.moving_avg == 0 || self.moving_avg > self.window {
            return Err(Error::Config(format!(
                "moving average {} must be in 1..={}",
                self.moving_avg, self.window
            )));
        }
        if self.target_channel >= self.channels {
            return Err(Error::Config(format!("target channel {} out of range", self.target_channel)));
        }
        Ok(())
    }
}

/// Splits `x` into a centered moving-average trend and the remainder
/// `x - trend`. Ends are padded by repeating the first and last values.
pub fn decompose(x: &[f64], moving_avg: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if moving_avg == 0 || moving_avg > x.len() {
        return Err(Error::InvalidParameter(format!(
            "moving average {moving_avg} must be in 1..={}",
            x.len()
        )));
    }
    let front = (moving_avg - 1) / 2;
    let n = x.len();
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    let trend: Vec<f64> = (0..n as isize)
        .map(|t| {
            let lo = t - front as isize;
            (lo..lo + moving_avg as isize).map(at).sum::<f64>() / moving_avg as f64
        })
        .collect();
    let remainder = x.iter().zip(&trend).map(|(v, m)| v - m).collect();
    Ok((trend, remainder))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DlinearModel {
    config: DlinearConfig,
    pub params: ParamStore,
    trend_w: ParamId,
    trend_b: ParamId,
    rem_w: ParamId,
    rem_b: ParamId,
}

impl DlinearModel {
    /// Weights start at `1 / SL` (window mean) and biases at zero.
    pub fn new(config: DlinearConfig) -> Result<Self> {
        config.validate()?;
        let rows = if config.individual { config.channels } else { 1 };
        let sl = config.window;
        let mut params = ParamStore::new();
        let trend_w = params.add("trend.w", Tensor::full(&[rows, sl], 1.0 / sl as f64));
        let trend_b = params.add("trend.b", Tensor::zeros(&[rows]));
        let rem_w = params.add("remainder.w", Tensor::full(&[rows, sl], 1.0 / sl as f64));
        let rem_b = params.add("remainder.b", Tensor::zeros(&[rows]));
        Ok(Self {
            config,
            params,
            trend_w,
            trend_b,
            rem_w,
            rem_b,
        })
    }

    pub fn config(&self) -> &DlinearConfig {
        &self.config
    }

    /// Trend and remainder inputs `(N, C, SL)` for full `SL x C` windows.
    fn decomposed_inputs(&self, windows: &[&[f64]]) -> Result<(Tensor, Tensor)> {
        let (sl, c) = (self.config.window, self.config.channels);
        let mut trend = Vec::with_capacity(windows.len() * c * sl);
        let mut rem = Vec::with_capacity(windows.len() * c * sl);
        for w in windows {
            if w.len() != sl * c {
                return Err(Error::shape("dlinear window", &[w.len()], &[sl, c]));
            }
            for ch in 0..c {
                let series: Vec<f64> = (0..sl).map(|t| w[t * c + ch]).collect();
                let (t, r) = decompose(&series, self.config.moving_avg)?;
                trend.extend(t);
                rem.extend(r);
            }
        }
        let shape = [windows.len(), c, sl];
        Ok((Tensor::new(&shape, trend)?, Tensor::new(&shape, rem)?))
    }

    /// Predictions `(N, C)` as a graph node.
    pub fn forward_graph(&self, g: &mut Graph, windows: &[&[f64]]) -> Result<Var> {
        let (trend, rem) = self.decomposed_inputs(windows)?;
        let trend = g.constant(trend);
        let rem = g.constant(rem);
        let branch = |g: &mut Graph, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let w = g.param(&self.params, w);
            let b = g.param(&self.params, b);
            let xw = g.mul(x, w)?;
            let y = g.sum_last(xw)?;
            g.add(y, b)
        };
        let t = branch(g, trend, self.trend_w, self.trend_b)?;
        let r = branch(g, rem, self.rem_w, self.rem_b)?;
        g.add(t, r)
    }

    /// Next-step prediction for every channel of one `SL x C` window.
    pub fn predict(&self, window: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let y = self.forward_graph(&mut g, &[window])?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn to_checkpoint(&self, channel_names: &[String]) -> Checkpoint {
        let c = &self.config;
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "dlinear")
            .with_meta("channels", c.channels)
            .with_meta("SL", c.window)
            .with_meta("moving_avg", c.moving_avg)
            .with_meta("individual", u8::from(c.individual))
            .with_meta("target_channel", c.target_channel)
            .with_meta("channel_names", channel_names.join(","))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("dlinear") {
            return Err(Error::Format(format!(
                "expected a dlinear checkpoint, found kind {:?}",
                ck.meta("kind")
            )));
        }
        let config = DlinearConfig {
            channels: ck.meta_parse("channels")?,
            window: ck.meta_parse("SL")?,
            moving_avg: ck.meta_parse("moving_avg")?,
            individual: ck.meta_parse::<u8>("individual")? != 0,
            target_channel: ck.meta_parse("target_channel")?,
        };
        let mut model = Self::new(config)?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }
}

impl Trainable for DlinearModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Mean squared error over every channel of the batch.
    fn batch_loss(&self, g: &mut Graph, batch: &[Window<'_>], _rng: &mut ChaCha8Rng) -> Result<Var> {
        let inputs: Vec<&[f64]> = batch.iter().map(|w| w.input).collect();
        let pred = self.forward_graph(g, &inputs)?;
        let c = self.config.channels;
        let target = Tensor::from_fn(&[batch.len(), c], |i| batch[i / c].target[i % c]);
        let target = g.constant(target);
        g.mse(pred, target)
    }

    fn predict_target(&self, windows: &[Window<'_>], _ensemble: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let c = self.config.channels;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|w| w.input).collect();
            let mut g = Graph::new();
            let y = self.forward_graph(&mut g, &inputs)?;
            out.extend(g.value(y).data().chunks(c).map(|row| row[self.config.target_channel]));
        }
        Ok(out)
    }
}
