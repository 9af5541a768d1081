//! Subset-sampled minibatch training, validation-based model selection,
//! statistical metrics and random hyperparameter search.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::market_data::Window;
use crate::pmformer::{draw_target_subset, Pass, Pmformer};

/// Fixed seed of the subset stream used for validation predictions, so every
/// epoch is scored on the same subsets.
pub const EVAL_SEED: u64 = 0x5eed_0e7a;

/// Ensemble size used for validation and test predictions.
pub const DEFAULT_ENSEMBLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// Subsets averaged per validation prediction.
    pub ensemble: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.06e-4,
            batch_size: 128,
            epochs: 100,
            patience: 10,
            seeds: vec![42, 1337, 2025],
            ensemble: DEFAULT_ENSEMBLE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.patience == 0 || self.ensemble == 0 {
            return Err(Error::Config("batch size, patience and ensemble must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected parameters.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn best_val_mse(&self) -> Option<f64> {
        self.best_epoch.map(|i| self.epochs[i].val_mse)
    }

    /// `epoch,train_loss,val_mse` rows; wall-clock is left out so equal runs
    /// give equal files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mse\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:?},{:?}", e.epoch, e.train_loss, e.val_mse);
        }
        out
    }
}

/// A model the training loop can optimize.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Scalar training loss of one minibatch. `rng` supplies any per-batch
    /// randomness (feature partitions, dropout).
    fn batch_loss(&self, g: &mut Graph, batch: &[Window<'_>], rng: &mut ChaCha8Rng) -> Result<Var>;

    /// Scaled target-channel predictions for evaluation windows.
    fn predict_target(&self, windows: &[Window<'_>], ensemble: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// Random partition of `0..d` into groups of `s` (the last group holds the
/// `d mod s` remainder when nonzero).
pub fn sample_partition<R: Rng + ?Sized>(d: usize, s: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if !(1 < s && s < d) {
        return Err(Error::Config(format!("subset size must satisfy 1 < S < D, got S={s} D={d}")));
    }
    let mut perm: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    Ok(perm.chunks(s).map(<[usize]>::to_vec).collect())
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("mse_loss", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() {
        return Err(Error::EmptyData("mse of empty vectors".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

impl Trainable for Pmformer {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Mean squared error over every feature of a fresh random partition.
    fn batch_loss(&self, g: &mut Graph, batch: &[Window<'_>], rng: &mut ChaCha8Rng) -> Result<Var> {
        let c = self.config();
        let partition = sample_partition(c.num_features, c.subset_size, rng)?;
        let inputs: Vec<&[f64]> = batch.iter().map(|w| w.input).collect();
        let b = self.bind(g);
        let mut total: Option<Var> = None;
        for group in &partition {
            let x = g.constant(self.gather_inputs(&inputs, group)?);
            let pred = self.forward_graph(g, &b, x, group, &mut Pass::Train(&mut *rng))?;
            let target = Tensor::from_fn(&[batch.len(), group.len()], |i| {
                batch[i / group.len()].target[group[i % group.len()]]
            });
            let target = g.constant(target);
            let diff = g.sub(pred, target)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        let total = total.ok_or_else(|| Error::EmptyData("empty partition".into()))?;
        Ok(g.scale(total, 1.0 / (batch.len() * c.num_features) as f64))
    }

    /// Averages `ensemble` target-containing subsets, the same subsets for
    /// every window.
    fn predict_target(&self, windows: &[Window<'_>], ensemble: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        if ensemble == 0 {
            return Err(Error::InvalidParameter("ensemble size must be >= 1".into()));
        }
        let c = self.config();
        let subsets = (0..ensemble)
            .map(|_| draw_target_subset(c.num_features, c.subset_size, c.target_channel, rng))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<&[f64]> = windows.iter().map(|w| w.input).collect();
        let mut acc = vec![0.0; windows.len()];
        // Chunking bounds graph memory on long evaluation sets.
        for (ci, chunk) in inputs.chunks(256).enumerate() {
            for subset in &subsets {
                let pred = self.forward_windows(chunk, subset)?;
                for n in 0..chunk.len() {
                    acc[ci * 256 + n] += pred[n * subset.len()];
                }
            }
        }
        Ok(acc.into_iter().map(|a| a / ensemble as f64).collect())
    }
}

/// Scaled target-channel MSE of `model` over `windows`.
pub fn evaluate_target_mse<M: Trainable>(
    model: &M,
    windows: &[Window<'_>],
    target_channel: usize,
    ensemble: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let pred = model.predict_target(windows, ensemble, &mut rng)?;
    let actual: Vec<f64> = windows.iter().map(|w| w.target[target_channel]).collect();
    mse_loss(&pred, &actual)
}

/// Adam training with per-epoch validation and early stopping. On return the
/// model holds the parameters of the best validation epoch (or its initial
/// parameters when no epoch ran).
pub fn train<M: Trainable>(
    model: &mut M,
    train_windows: &[Window<'_>],
    val_windows: &[Window<'_>],
    target_channel: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    config.validate()?;
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::EmptyData("training and validation windows must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Window<'_>> = idx.iter().map(|&i| train_windows[i]).collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &batch, &mut rng)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            model.params_mut().zero_grad();
            g.backward_into(loss, model.params_mut())?;
            adam.step(model.params_mut(), config.lr)?;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let val_mse = evaluate_target_mse(model, val_windows, target_channel, config.ensemble)?;
        if !val_mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: usize::MAX,
                loss: val_mse,
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_mse,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: train {:.6e} val {:.6e}", loss_sum / seen as f64, val_mse);
        if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
            best = Some((val_mse, model.params().clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    model.params_mut().zero_grad();
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Statistics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

pub fn evaluate_statistics(predictions: &[f64], actuals: &[f64]) -> Result<Statistics> {
    let mse = mse_loss(predictions, actuals)?;
    let mae = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a).abs())
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(Statistics {
        mse,
        rmse: mse.sqrt(),
        mae,
    })
}

/// Candidate values for random search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Learning rate bounds, sampled log-uniformly.
    pub lr: (f64, f64),
    pub batch_size: Vec<usize>,
    pub dropout: Vec<f64>,
    pub window: Vec<usize>,
    pub label_len: Vec<usize>,
    pub dim: Vec<usize>,
    pub d_ff: Vec<usize>,
    pub encoder_layers: Vec<usize>,
    pub decoder_layers: Vec<usize>,
    pub heads: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr: (1e-5, 1e-3),
            batch_size: vec![32, 64, 128],
            dropout: vec![0.1, 0.2, 0.3, 0.4, 0.7],
            window: vec![24, 48, 96, 192],
            label_len: vec![12, 24, 48, 96],
            dim: vec![32, 64, 128, 256, 512],
            d_ff: vec![32, 64, 128, 256, 512],
            encoder_layers: vec![1, 2, 3, 4],
            decoder_layers: vec![1, 2, 3],
            heads: vec![2, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub window: usize,
    pub label_len: usize,
    pub dim: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lr;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid learning-rate range ({lo}, {hi})")));
        }
        let lists = [
            ("batch_size", self.batch_size.len()),
            ("dropout", self.dropout.len()),
            ("window", self.window.len()),
            ("label_len", self.label_len.len()),
            ("dim", self.dim.len()),
            ("d_ff", self.d_ff.len()),
            ("encoder_layers", self.encoder_layers.len()),
            ("decoder_layers", self.decoder_layers.len()),
            ("heads", self.heads.len()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("search space list {name} is empty")));
        }
        if !self.window.iter().any(|&sl| self.label_len.iter().any(|&ll| ll < sl)) {
            return Err(Error::Config("no label length is shorter than any window".into()));
        }
        if !self.dim.iter().any(|&d| self.heads.iter().any(|&h| h > 0 && d % h == 0)) {
            return Err(Error::Config("no dim is divisible by any head count".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SearchPoint> {
        self.validate()?;
        let pick = |rng: &mut R, v: &[usize]| v[rng.gen_range(0..v.len())];
        let (lo, hi) = self.lr;
        let lr = if lo == hi { lo } else { (rng.gen_range(lo.ln()..hi.ln())).exp().clamp(lo, hi) };
        let batch_size = pick(rng, &self.batch_size);
        let dropout = self.dropout[rng.gen_range(0..self.dropout.len())];
        let windows: Vec<usize> = self
            .window
            .iter()
            .copied()
            .filter(|&sl| self.label_len.iter().any(|&ll| ll < sl))
            .collect();
        let window = pick(rng, &windows);
        let lls: Vec<usize> = self.label_len.iter().copied().filter(|&ll| ll < window).collect();
        let label_len = pick(rng, &lls);
        let dims: Vec<usize> = self
            .dim
            .iter()
            .copied()
            .filter(|&d| self.heads.iter().any(|&h| h > 0 && d % h == 0))
            .collect();
        let dim = pick(rng, &dims);
        let hs: Vec<usize> = self.heads.iter().copied().filter(|&h| h > 0 && dim % h == 0).collect();
        let heads = pick(rng, &hs);
        Ok(SearchPoint {
            lr,
            batch_size,
            dropout,
            window,
            label_len,
            dim,
            d_ff: pick(rng, &self.d_ff),
            encoder_layers: pick(rng, &self.encoder_layers),
            decoder_layers: pick(rng, &self.decoder_layers),
            heads,
        })
    }
}

/// Samples `trials` points and scores each with `evaluate` (mean validation
/// MSE across seeds); returns them best first.
pub fn random_search<R, F>(
    space: &SearchSpace,
    trials: usize,
    rng: &mut R,
    mut evaluate: F,
) -> Result<Vec<(SearchPoint, f64)>>
where
    R: Rng + ?Sized,
    F: FnMut(&SearchPoint) -> Result<f64>,
{
    if trials == 0 {
        return Err(Error::Config("random search needs at least one trial".into()));
    }
    space.validate()?;
    let mut scored = Vec::with_capacity(trials);
    for _ in 0..trials {
        let point = space.sample(rng)?;
        let score = evaluate(&point)?;
        scored.push((point, score));
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indicators::FeatureMatrix;
    use crate::market_data::make_windows;
    use crate::pmformer::PmformerConfig;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn partition_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_partition(16, 4, &mut rng).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![4; 4]);
        let p = sample_partition(10, 4, &mut rng).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let a = sample_partition(16, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_partition(16, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(sample_partition(16, 1, &mut rng).is_err());
        assert!(sample_partition(16, 16, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_exact(d in 3usize..40, s_frac in 0.0f64..1.0, seed: u64) {
            let s = 2 + ((d - 3) as f64 * s_frac) as usize;
            let p = sample_partition(d, s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut all: Vec<usize> = p.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..d).collect::<Vec<_>>());
            prop_assert_eq!(p.len(), d.div_ceil(s));
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse_loss(&[0.0], &[1.0, 1.0]).is_err());
        // batch mean equals mean of equal-sized per-item losses
        let p = [0.1, 0.4, -0.3, 0.8];
        let t = [0.0, 0.5, 0.1, 0.2];
        let per_item = (mse_loss(&p[..2], &t[..2]).unwrap() + mse_loss(&p[2..], &t[2..]).unwrap()) / 2.0;
        assert!((mse_loss(&p, &t).unwrap() - per_item).abs() < 1e-15);
    }

    #[test]
    fn statistics_examples() {
        let s = evaluate_statistics(&[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert_eq!((s.mse, s.rmse, s.mae), (0.0, 0.0, 0.0));
        let s = evaluate_statistics(&[0.0, 0.0], &[0.03, -0.01]).unwrap();
        assert!((s.mse - 5e-4).abs() < 1e-15);
        assert!((s.rmse - 0.022360679774997897).abs() < 1e-12);
        assert!((s.mae - 0.02).abs() < 1e-15);
        assert!((s.rmse * s.rmse - s.mse).abs() < 1e-12);
        assert!(evaluate_statistics(&[], &[]).is_err());
    }

    #[test]
    fn search_contracts() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let p = space.sample(&mut rng).unwrap();
            assert!((1e-5..=1e-3).contains(&p.lr));
            assert!(p.label_len < p.window);
            assert_eq!(p.dim % p.heads, 0);
        }
        let one = random_search(&space, 1, &mut rng, |_| Ok(0.5)).unwrap();
        assert_eq!(one.len(), 1);
        let mut k = 0.0;
        let ranked = random_search(&space, 12, &mut rng, |p| {
            k += 1.0;
            Ok((k * 7.3) % 5.0 + p.lr)
        })
        .unwrap();
        assert!(ranked.windows(2).all(|w| w[0].1 <= w[1].1));
        let bad = SearchSpace { heads: vec![], ..SearchSpace::default() };
        assert!(random_search(&bad, 1, &mut rng, |_| Ok(0.0)).is_err());
        assert!(random_search(&space, 0, &mut rng, |_| Ok(0.0)).is_err());
    }

    fn toy_matrix(t: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d = 6;
        let mut values = vec![0.0; t * d];
        for r in 0..t {
            for c in 0..5 {
                values[r * d + c] = rng.gen_range(0.0..1.0);
            }
            if r > 0 {
                values[r * d + 5] = values[(r - 1) * d] * 0.8 + rng.gen_range(0.0..0.1);
            }
        }
        FeatureMatrix::new(values, (0..d).map(|c| format!("c{c}")).collect(), None).unwrap()
    }

    fn toy_config() -> PmformerConfig {
        PmformerConfig {
            num_features: 6,
            subset_size: 3,
            window: 4,
            dim: 8,
            heads: 2,
            d_ff: 16,
            layers: 1,
            dropout: 0.0,
            target_channel: 5,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let m = toy_matrix(40);
        let w = make_windows(&m, 4).unwrap();
        let mut model = Pmformer::new(toy_config(), 1).unwrap();
        let init = model.clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let h = train(&mut model, &w[..20], &w[20..], 5, &cfg, 42).unwrap();
        assert!(h.epochs.is_empty());
        assert_eq!(h.best_epoch, None);
        assert_eq!(model, init);
    }

    #[test]
    fn training_is_deterministic_and_selects_best() {
        let m = toy_matrix(120);
        let w = make_windows(&m, 4).unwrap();
        let cfg = TrainConfig { lr: 3e-3, batch_size: 16, epochs: 6, patience: 3, ..TrainConfig::default() };
        let run = || {
            let mut model = Pmformer::new(toy_config(), 9).unwrap();
            let h = train(&mut model, &w[..80], &w[80..], 5, &cfg, 42).unwrap();
            (model, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1.to_csv(), h2.to_csv());
        assert_eq!(m1, m2);
        let min = h1.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(h1.best_val_mse(), Some(min));
        let again = evaluate_target_mse(&m1, &w[80..], 5, cfg.ensemble).unwrap();
        assert_eq!(again, min);
    }
}
