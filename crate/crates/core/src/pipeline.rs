//! End-to-end runs: features, split, scaling, training across seeds, and the
//! test-period backtest. Every step is deterministic given the config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Checkpoint;
use crate::backtest::{build_report, BacktestReport, EquityCurve};
use crate::baselines::{fit_ar, predict_ar, ArModel, DlinearModel};
use crate::config::{ModelKind, RunConfig};
use crate::error::{Error, Result};
use crate::indicators::{build_feature_matrix, FeatureMatrix, CHANNELS, TARGET_CHANNEL};
use crate::market_data::{chronological_split, make_windows, MinMaxScaler, OhlcvSeries, SplitIndex, SplitRatios, Window};
use crate::pmformer::Pmformer;
use crate::training::{random_search, train, SearchPoint, SearchSpace, TrainConfig, TrainHistory, Trainable, EVAL_SEED};

pub const CONFIG_FILE: &str = "config.toml";
pub const SCALER_FILE: &str = "scaler.txt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const AR_FILE: &str = "ar_model.txt";
pub const REPORT_FILE: &str = "report.toml";
pub const EQUITY_FILE: &str = "equity.csv";

/// Loads a feature matrix from either a feature CSV (leading `date` column)
/// or raw daily klines.
pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input not found"),
        ));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with("date,") {
        return FeatureMatrix::from_csv(&text);
    }
    let series = OhlcvSeries::from_csv_path(path)?;
    for gap in &series.gaps {
        log::warn!("{} missing day(s) after {}", gap.missing_days, gap.after);
    }
    build_feature_matrix(&series)
}

/// The return channel: `log_return` when present, else the last column.
pub fn target_channel(matrix: &FeatureMatrix) -> usize {
    matrix
        .channel_index(CHANNELS[TARGET_CHANNEL])
        .unwrap_or(matrix.cols() - 1)
}

/// A feature matrix split chronologically and scaled with training-row
/// statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub raw: FeatureMatrix,
    pub scaled: FeatureMatrix,
    pub scaler: MinMaxScaler,
    pub split: SplitIndex,
    pub target: usize,
    pub window: usize,
}

/// Windows grouped by the split that holds their target row.
pub struct SplitWindows<'a> {
    pub train: Vec<Window<'a>>,
    pub val: Vec<Window<'a>>,
    pub test: Vec<Window<'a>>,
}

impl Prepared {
    pub fn new(raw: FeatureMatrix, window: usize) -> Result<Self> {
        let split = chronological_split(raw.rows(), SplitRatios::default())?;
        if split.val_end <= window {
            return Err(Error::InsufficientData {
                needed: window + 1,
                available: split.val_end,
            });
        }
        let scaler = MinMaxScaler::fit(&raw, &split)?;
        let scaled = scaler.apply(&raw)?;
        let target = target_channel(&raw);
        Ok(Self {
            raw,
            scaled,
            scaler,
            split,
            target,
            window,
        })
    }

    pub fn windows(&self) -> Result<SplitWindows<'_>> {
        let all = make_windows(&self.scaled, self.window)?;
        let mut out = SplitWindows {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for w in all {
            let t = w.target_row(self.window);
            if self.split.train().contains(&t) {
                out.train.push(w);
            } else if self.split.val().contains(&t) {
                out.val.push(w);
            } else {
                out.test.push(w);
            }
        }
        if out.train.is_empty() {
            return Err(Error::EmptyData(format!(
                "no training windows of length {} fit in {} training rows",
                self.window, self.split.train_end
            )));
        }
        Ok(out)
    }

    /// Unscaled target values of the test rows.
    pub fn test_actuals(&self) -> Vec<f64> {
        self.split.test().map(|t| self.raw.get(t, self.target)).collect()
    }
}

/// A fitted predictor of the target channel.
#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    Naive,
    Ar(ArModel),
    Pmformer(Pmformer),
    Dlinear(DlinearModel),
}

impl Fitted {
    pub fn kind(&self) -> ModelKind {
        match self {
            Fitted::Naive => ModelKind::Naive,
            Fitted::Ar(_) => ModelKind::Ar,
            Fitted::Pmformer(_) => ModelKind::Pmformer,
            Fitted::Dlinear(_) => ModelKind::Dlinear,
        }
    }

    /// Test-row predictions on the original scale.
    pub fn predict_test(&self, prep: &Prepared, ensemble: usize) -> Result<Vec<f64>> {
        let column = prep.raw.column(prep.target);
        match self {
            Fitted::Naive => Ok(prep.split.test().map(|t| column[t - 1]).collect()),
            Fitted::Ar(m) => prep.split.test().map(|t| predict_ar(m, &column[..t])).collect(),
            Fitted::Pmformer(m) => unscale_predictions(m, prep, ensemble),
            Fitted::Dlinear(m) => unscale_predictions(m, prep, ensemble),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.meta("kind") {
            Some("pmformer") => Ok(Fitted::Pmformer(Pmformer::from_checkpoint(ck)?)),
            Some("dlinear") => Ok(Fitted::Dlinear(DlinearModel::from_checkpoint(ck)?)),
            other => Err(Error::Format(format!("unsupported checkpoint kind {other:?}"))),
        }
    }
}

fn unscale_predictions<M: Trainable>(model: &M, prep: &Prepared, ensemble: usize) -> Result<Vec<f64>> {
    let windows = prep.windows()?;
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let scaled = model.predict_target(&windows.test, ensemble, &mut rng)?;
    Ok(scaled.into_iter().map(|y| prep.scaler.unscale(prep.target, y)).collect())
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub history: TrainHistory,
    pub model: Fitted,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub runs: Vec<SeedRun>,
    /// Index into `runs` of the lowest validation MSE.
    pub best: usize,
}

impl TrainOutcome {
    pub fn best_model(&self) -> &Fitted {
        &self.runs[self.best].model
    }

    pub fn mean_val_mse(&self) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.history.best_val_mse()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `seed,best_epoch,best_val_mse` per seed followed by the mean.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("seed,best_epoch,best_val_mse\n");
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:?}"));
        for r in &self.runs {
            let epoch = r.history.best_epoch.map_or_else(String::new, |e| e.to_string());
            let _ = writeln!(out, "{},{epoch},{}", r.seed, fmt(r.history.best_val_mse()));
        }
        let _ = writeln!(out, "mean,,{}", fmt(self.mean_val_mse()));
        out
    }
}

fn train_one(config: &RunConfig, prep: &Prepared, tc: &TrainConfig, seed: u64) -> Result<SeedRun> {
    let kind = config.kind()?;
    let windows = prep.windows()?;
    let d = prep.scaled.cols();
    let (model, history) = match kind {
        ModelKind::Pmformer => {
            let mut m = Pmformer::new(config.pmformer_config(d, prep.target), seed)?;
            let h = train(&mut m, &windows.train, &windows.val, prep.target, tc, seed)?;
            (Fitted::Pmformer(m), h)
        }
        ModelKind::Dlinear => {
            let mut m = DlinearModel::new(config.dlinear_config(d, prep.target))?;
            let h = train(&mut m, &windows.train, &windows.val, prep.target, tc, seed)?;
            (Fitted::Dlinear(m), h)
        }
        ModelKind::Ar => {
            let column = prep.raw.column(prep.target);
            let m = fit_ar(&column[prep.split.train()], config.ar.p, config.ar.d)?;
            (Fitted::Ar(m), TrainHistory::default())
        }
        ModelKind::Naive => (Fitted::Naive, TrainHistory::default()),
    };
    Ok(SeedRun { seed, history, model })
}

/// Trains the configured model once per seed; seeds run on separate threads.
/// Untrained models (naive, AR) are fitted once.
pub fn train_all(config: &RunConfig, prep: &Prepared) -> Result<TrainOutcome> {
    let kind = config.kind()?;
    let tc = config.train_config();
    let seeds: Vec<u64> = if kind.is_trained() { tc.seeds.clone() } else { vec![tc.seeds[0]] };
    let results: Vec<Result<SeedRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let tc = &tc;
                s.spawn(move || train_one(config, prep, tc, seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("training thread panicked".into()))))
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let va = a.1.history.best_val_mse().unwrap_or(f64::INFINITY);
            let vb = b.1.history.best_val_mse().unwrap_or(f64::INFINITY);
            va.total_cmp(&vb)
        })
        .map_or(0, |(i, _)| i);
    Ok(TrainOutcome { runs, best })
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Best configuration in the hyperparameter-table vocabulary.
pub fn best_config_text(config: &RunConfig, outcome: &TrainOutcome) -> String {
    let m = &config.model;
    let best = &outcome.runs[outcome.best];
    let mut out = String::from("[best]\n");
    let _ = writeln!(out, "model = \"{}\"", config.run.model);
    let _ = writeln!(out, "seed = {}", best.seed);
    if let Some(v) = best.history.best_val_mse() {
        let _ = writeln!(out, "val_mse = {v:?}");
    }
    if let Some(v) = outcome.mean_val_mse() {
        let _ = writeln!(out, "mean_val_mse = {v:?}");
    }
    out.push_str("\n[config]\n");
    let _ = writeln!(out, "LR = {:?}\nBS = {}\nSL = {}\nLL = {}", m.lr, m.batch_size, m.window, m.label_len);
    let _ = writeln!(out, "layers = \"e={}, d={}\"", m.encoder_layers, m.decoder_layers);
    let _ = writeln!(out, "Dim = {}\nH = {}\nd_ff = {}\nD = {:?}", m.dim, m.heads, m.d_ff, m.dropout);
    out
}

/// Writes the config echo, scaler, per-seed checkpoints and histories, the
/// seed summary and the best model into `out`.
pub fn write_training(out: &Path, config: &RunConfig, prep: &Prepared, outcome: &TrainOutcome) -> Result<()> {
    ensure_dir(out)?;
    write(out.join(CONFIG_FILE), &config.to_toml())?;
    write(out.join(SCALER_FILE), &prep.scaler.to_text())?;
    let names = &prep.raw.channel_names;
    for run in &outcome.runs {
        let ck = match &run.model {
            Fitted::Pmformer(m) => Some(m.to_checkpoint(names)),
            Fitted::Dlinear(m) => Some(m.to_checkpoint(names)),
            Fitted::Ar(m) => {
                write(out.join(AR_FILE), &m.to_text())?;
                None
            }
            Fitted::Naive => None,
        };
        if let Some(ck) = ck {
            let dir = out.join(format!("seed_{}", run.seed));
            ensure_dir(&dir)?;
            ck.save(dir.join("checkpoint.ckpt"))?;
            write(dir.join("history.csv"), &run.history.to_csv())?;
        }
    }
    if let Fitted::Pmformer(_) | Fitted::Dlinear(_) = outcome.best_model() {
        let best = &outcome.runs[outcome.best];
        let ck = match &best.model {
            Fitted::Pmformer(m) => m.to_checkpoint(names),
            Fitted::Dlinear(m) => m.to_checkpoint(names),
            _ => unreachable!(),
        };
        ck.save(out.join(BEST_CHECKPOINT))?;
        write(out.join("train_summary.csv"), &outcome.summary_csv())?;
        write(out.join("best_config.toml"), &best_config_text(config, outcome))?;
    }
    Ok(())
}

/// Loads the model a training run left in `dir` (or `checkpoint` when given).
pub fn load_fitted(config: &RunConfig, dir: &Path, checkpoint: Option<&Path>) -> Result<Fitted> {
    match config.kind()? {
        ModelKind::Naive => Ok(Fitted::Naive),
        ModelKind::Ar => {
            let path = checkpoint.map_or_else(|| dir.join(AR_FILE), Path::to_path_buf);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(Fitted::Ar(ArModel::from_text(&text)?))
        }
        ModelKind::Pmformer | ModelKind::Dlinear => {
            let path = checkpoint.map_or_else(|| dir.join(BEST_CHECKPOINT), Path::to_path_buf);
            let fitted = Fitted::from_checkpoint(&Checkpoint::load(&path)?)?;
            if fitted.kind() != config.kind()? {
                return Err(Error::Config(format!(
                    "checkpoint holds a {} model but the config selects {}",
                    fitted.kind(),
                    config.run.model
                )));
            }
            Ok(fitted)
        }
    }
}

/// Test-period report and equity curve for a fitted model.
pub fn backtest_fitted(
    config: &RunConfig,
    prep: &Prepared,
    fitted: &Fitted,
) -> Result<(BacktestReport, EquityCurve)> {
    let preds = fitted.predict_test(prep, config.train.ensemble)?;
    let actuals = prep.test_actuals();
    build_report(&config.run.model, &config.run.asset, &preds, &actuals, config.run.cost_per_side)
}

/// Writes `report.toml` and `equity.csv` into `out`.
pub fn write_backtest(out: &Path, prep: &Prepared, report: &BacktestReport, curve: &EquityCurve) -> Result<()> {
    ensure_dir(out)?;
    let dates = prep.raw.dates.as_ref().map(|d| &d[prep.split.test()]);
    write(out.join(REPORT_FILE), &report.to_toml())?;
    write(out.join(EQUITY_FILE), &curve.to_csv(dates)?)
}

/// Config for one random-search point on top of `base`.
pub fn apply_search_point(base: &RunConfig, p: &SearchPoint) -> RunConfig {
    let mut c = base.clone();
    c.model.lr = p.lr;
    c.model.batch_size = p.batch_size;
    c.model.dropout = p.dropout;
    c.model.window = p.window;
    c.model.label_len = p.label_len;
    c.model.dim = p.dim;
    c.model.d_ff = p.d_ff;
    c.model.encoder_layers = p.encoder_layers;
    c.model.decoder_layers = p.decoder_layers;
    c.model.heads = p.heads;
    c
}

/// Random search over `space`, each trial scored by the mean best validation
/// MSE across the configured seeds. Returns trials best first.
pub fn search(
    base: &RunConfig,
    raw: &FeatureMatrix,
    space: &SearchSpace,
    trials: usize,
    seed: u64,
) -> Result<Vec<(RunConfig, f64)>> {
    if !base.kind()?.is_trained() {
        return Err(Error::Config(format!("random search needs a trained model, not {}", base.run.model)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranked = random_search(space, trials, &mut rng, |p| {
        let config = apply_search_point(base, p);
        config.validate()?;
        let prep = Prepared::new(raw.clone(), config.model.window)?;
        let outcome = train_all(&config, &prep)?;
        let score = outcome.mean_val_mse().unwrap_or(f64::INFINITY);
        log::info!("trial {p:?}: mean validation MSE {score:e}");
        Ok(score)
    })?;
    Ok(ranked.into_iter().map(|(p, s)| (apply_search_point(base, &p), s)).collect())
}
