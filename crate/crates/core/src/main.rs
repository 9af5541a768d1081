use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pmformer_core::backtest::{compare, BacktestReport};
use pmformer_core::config::RunConfig;
use pmformer_core::pipeline::{self, Prepared};
use pmformer_core::training::SearchSpace;
use pmformer_core::{Error, ErrorClass, Result};

/// Train and evaluate the partial-multivariate transformer and its baselines
/// on daily crypto klines.
#[derive(Debug, Parser)]
#[command(name = "pmformer", version)]
struct Cli {
    /// Run config file or bundled preset name (btc_pmformer, eth_ar, ...).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Use this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the 16-channel feature matrix from a klines CSV.
    Features {
        input: PathBuf,
        /// Defaults to `<out>/features.csv`.
        output: Option<PathBuf>,
    },
    /// Train the configured model once per seed.
    Train {
        /// Klines or feature CSV; overrides `run.data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Backtest a trained model on the test split.
    Backtest {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint (or AR model file); defaults to the one in `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Side-by-side table of backtest reports.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Random hyperparameter search ranked by validation MSE.
    Search {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("error: {stage}: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

type Staged<T> = std::result::Result<T, (&'static str, Error)>;

trait Stage<T> {
    fn stage(self, name: &'static str) -> Staged<T>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> Staged<T> {
        self.map_err(|e| (name, e))
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let name = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let config = RunConfig::load(name)?;
    Ok(match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn out_dir(cli: &Cli, config: Option<&RunConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.and_then(|c| c.run.out.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn prepare(config: &RunConfig, data: Option<&Path>) -> Result<Prepared> {
    let path = data
        .map(Path::to_path_buf)
        .or_else(|| config.run.data.clone())
        .ok_or_else(|| Error::Config("no data file: pass --data or set run.data".into()))?;
    let raw = pipeline::load_features(&path)?;
    Prepared::new(raw, config.model.window)
}

fn run(cli: Cli) -> Staged<()> {
    match &cli.command {
        Command::Features { input, output } => {
            let matrix = pipeline::load_features(input).stage("features")?;
            let path = output.clone().unwrap_or_else(|| out_dir(&cli, None).join("features.csv"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e)).stage("features")?;
            }
            matrix.write_csv(&path).stage("features")?;
            log::info!("wrote {} rows x {} channels to {}", matrix.rows(), matrix.cols(), path.display());
        }
        Command::Train { data } => {
            let config = load_config(&cli).stage("config")?;
            let prep = prepare(&config, data.as_deref()).stage("data")?;
            let outcome = pipeline::train_all(&config, &prep).stage("train")?;
            let out = out_dir(&cli, Some(&config));
            pipeline::write_training(&out, &config, &prep, &outcome).stage("train")?;
            for r in &outcome.runs {
                if let Some(v) = r.history.best_val_mse() {
                    log::info!("seed {}: best validation MSE {v:.6e}", r.seed);
                }
            }
            log::info!("wrote training outputs to {}", out.display());
        }
        Command::Backtest { data, checkpoint } => {
            let config = load_config(&cli).stage("config")?;
            let prep = prepare(&config, data.as_deref()).stage("data")?;
            let out = out_dir(&cli, Some(&config));
            let fitted = match config.kind().stage("config")? {
                kind if kind.is_trained() || checkpoint.is_some() || out.join(pipeline::AR_FILE).exists() => {
                    pipeline::load_fitted(&config, &out, checkpoint.as_deref()).stage("load model")?
                }
                _ => pipeline::train_all(&config, &prep).stage("fit")?.best_model().clone(),
            };
            let (report, curve) = pipeline::backtest_fitted(&config, &prep, &fitted).stage("backtest")?;
            pipeline::write_backtest(&out, &prep, &report, &curve).stage("backtest")?;
            print!("{}", report.to_toml());
        }
        Command::Compare { reports } => {
            let parsed = reports
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    BacktestReport::from_toml(&text)
                })
                .collect::<Result<Vec<_>>>()
                .stage("compare")?;
            let table = compare(&parsed).stage("compare")?.render();
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).map_err(|e| Error::io(out, e)).stage("compare")?;
                let path = out.join("comparison.txt");
                fs::write(&path, &table).map_err(|e| Error::io(&path, e)).stage("compare")?;
            }
            print!("{table}");
        }
        Command::Search { data, trials } => {
            let config = load_config(&cli).stage("config")?;
            let path = data
                .clone()
                .or_else(|| config.run.data.clone())
                .ok_or_else(|| Error::Config("no data file: pass --data or set run.data".into()))
                .stage("config")?;
            let raw = pipeline::load_features(&path).stage("data")?;
            let seed = cli.seed.unwrap_or(config.train.seeds[0]);
            let ranked = pipeline::search(&config, &raw, &SearchSpace::default(), *trials, seed).stage("search")?;
            let out = out_dir(&cli, Some(&config));
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)).stage("search")?;
            let mut csv = String::from("rank,mean_val_mse,LR,BS,SL,LL,e,d,Dim,H,d_ff,D\n");
            for (i, (c, score)) in ranked.iter().enumerate() {
                let m = &c.model;
                csv.push_str(&format!(
                    "{},{score:?},{:?},{},{},{},{},{},{},{},{},{:?}\n",
                    i + 1,
                    m.lr,
                    m.batch_size,
                    m.window,
                    m.label_len,
                    m.encoder_layers,
                    m.decoder_layers,
                    m.dim,
                    m.heads,
                    m.d_ff,
                    m.dropout
                ));
            }
            let path = out.join("search.csv");
            fs::write(&path, &csv).map_err(|e| Error::io(&path, e)).stage("search")?;
            let best = out.join("best_config.toml");
            fs::write(&best, ranked[0].0.to_toml()).map_err(|e| Error::io(&best, e)).stage("search")?;
            print!("{csv}");
        }
    }
    Ok(())
}
