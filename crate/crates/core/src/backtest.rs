//! Sign-rule trading simulation and the report and comparison tables built
//! from it.

use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::evaluate_statistics;

/// Trading days per year used to annualize the Sharpe ratio.
pub const PERIODS_PER_YEAR: f64 = 365.0;

/// +1 (long) where the prediction is strictly positive, -1 (short) otherwise.
pub fn positions_from_predictions(preds: &[f64]) -> Result<Vec<i8>> {
    if preds.is_empty() {
        return Err(Error::EmptyData("no predictions to trade on".into()));
    }
    preds
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if !p.is_finite() {
                return Err(Error::Domain(format!("prediction {i} is not finite ({p})")));
            }
            Ok(if p > 0.0 { 1 } else { -1 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquityCurve {
    pub initial: f64,
    pub positions: Vec<i8>,
    pub strategy_returns: Vec<f64>,
    /// Equity after each day.
    pub equity: Vec<f64>,
}

impl EquityCurve {
    pub fn final_equity(&self) -> f64 {
        self.equity.last().copied().unwrap_or(self.initial)
    }

    /// Days on which a position is opened or flipped, the first day included.
    pub fn trade_count(&self) -> usize {
        self.positions
            .iter()
            .enumerate()
            .filter(|&(i, p)| i == 0 || self.positions[i - 1] != *p)
            .count()
    }

    /// `date,position,strategy_return,equity`; without dates the column holds
    /// the day index.
    pub fn to_csv(&self, dates: Option<&[NaiveDate]>) -> Result<String> {
        if let Some(d) = dates {
            if d.len() != self.equity.len() {
                return Err(Error::shape("equity dates", &[d.len()], &[self.equity.len()]));
            }
        }
        let mut out = String::from("date,position,strategy_return,equity\n");
        for i in 0..self.equity.len() {
            let date = dates.map_or_else(|| i.to_string(), |d| d[i].to_string());
            let _ = writeln!(
                out,
                "{date},{},{:?},{:?}",
                self.positions[i], self.strategy_returns[i], self.equity[i]
            );
        }
        Ok(out)
    }
}

/// Compounds `position * (exp(r) - 1)` from equity 1.0, charging `cost_per_side`
/// (a fraction of equity) for each side traded when the position changes.
pub fn run_strategy(positions: &[i8], log_returns: &[f64], cost_per_side: f64) -> Result<EquityCurve> {
    if positions.len() != log_returns.len() {
        return Err(Error::shape("run_strategy", &[positions.len()], &[log_returns.len()]));
    }
    if !(0.0..1.0).contains(&cost_per_side) {
        return Err(Error::InvalidParameter(format!("cost per side must be in [0, 1), got {cost_per_side}")));
    }
    let mut equity = Vec::with_capacity(positions.len());
    let mut strategy_returns = Vec::with_capacity(positions.len());
    let mut e = 1.0;
    let mut held = 0i8;
    for (&pos, &r) in positions.iter().zip(log_returns) {
        if pos != 1 && pos != -1 {
            return Err(Error::InvalidParameter(format!("position must be +1 or -1, got {pos}")));
        }
        let sides = f64::from((pos - held).abs());
        held = pos;
        let s = f64::from(pos) * r.exp_m1() - sides * cost_per_side;
        e *= 1.0 + s;
        strategy_returns.push(s);
        equity.push(e);
    }
    Ok(EquityCurve {
        initial: 1.0,
        positions: positions.to_vec(),
        strategy_returns,
        equity,
    })
}

/// Total return of the curve in percent.
pub fn roi(curve: &EquityCurve) -> Result<f64> {
    if curve.equity.is_empty() {
        return Err(Error::EmptyData("empty equity curve".into()));
    }
    Ok((curve.final_equity() / curve.initial - 1.0) * 100.0)
}

/// Annualized mean over sample standard deviation, zero risk-free rate.
pub fn sharpe(strategy_returns: &[f64]) -> Result<f64> {
    let n = strategy_returns.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, available: n });
    }
    let mean = strategy_returns.iter().sum::<f64>() / n as f64;
    let var = strategy_returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::UndefinedSharpe("strategy returns have zero variance".into()));
    }
    Ok(mean / var.sqrt() * PERIODS_PER_YEAR.sqrt())
}

/// Deepest fall from a running peak, in percent (so at most zero). The
/// initial equity counts as the first peak.
pub fn max_drawdown(equity: &[f64]) -> Result<f64> {
    if equity.is_empty() {
        return Err(Error::EmptyData("empty equity curve".into()));
    }
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for (i, &e) in equity.iter().enumerate() {
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::Domain(format!("equity {e} at step {i} is not positive")));
        }
        peak = peak.max(e);
        worst = worst.min((e / peak - 1.0) * 100.0);
    }
    Ok(worst)
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Percentage of steps where the three-valued signs agree.
pub fn directional_accuracy(preds: &[f64], actuals: &[f64]) -> Result<f64> {
    if preds.len() != actuals.len() {
        return Err(Error::shape("directional_accuracy", &[preds.len()], &[actuals.len()]));
    }
    if preds.is_empty() {
        return Err(Error::EmptyData("no predictions".into()));
    }
    let hits = preds.iter().zip(actuals).filter(|(p, a)| sign(**p) == sign(**a)).count();
    Ok(hits as f64 / preds.len() as f64 * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub model: String,
    pub asset: String,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub total_roi_pct: f64,
    /// NaN when the strategy returns have zero variance.
    pub sharpe: f64,
    pub max_drawdown_pct: f64,
    pub directional_accuracy_pct: f64,
    pub n_days: usize,
    pub n_trades: usize,
}

impl BacktestReport {
    pub fn to_toml(&self) -> String {
        // Every field is a scalar, so serialization cannot fail.
        toml::to_string(self).expect("flat report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

/// Assembles the statistical and trading metrics for aligned predicted and
/// actual log returns, returning the report with its equity curve.
pub fn build_report(
    model: &str,
    asset: &str,
    preds: &[f64],
    actuals: &[f64],
    cost_per_side: f64,
) -> Result<(BacktestReport, EquityCurve)> {
    let stats = evaluate_statistics(preds, actuals)?;
    let positions = positions_from_predictions(preds)?;
    let curve = run_strategy(&positions, actuals, cost_per_side)?;
    let sharpe = match sharpe(&curve.strategy_returns) {
        Ok(s) => s,
        Err(e @ (Error::UndefinedSharpe(_) | Error::InsufficientData { .. })) => {
            log::warn!("sharpe reported as NaN: {e}");
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    let report = BacktestReport {
        model: model.to_string(),
        asset: asset.to_string(),
        mse: stats.mse,
        rmse: stats.rmse,
        mae: stats.mae,
        total_roi_pct: roi(&curve)?,
        sharpe,
        max_drawdown_pct: max_drawdown(&curve.equity)?,
        directional_accuracy_pct: directional_accuracy(preds, actuals)?,
        n_days: preds.len(),
        n_trades: curve.trade_count(),
    };
    Ok((report, curve))
}

/// Which direction wins a comparison row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Lower,
    Higher,
}

pub type MetricGetter = fn(&BacktestReport) -> f64;

/// Metric rows of the comparison table: (label, direction, getter).
pub const METRICS: [(&str, Better, MetricGetter); 7] = [
    ("MSE", Better::Lower, |r| r.mse),
    ("RMSE", Better::Lower, |r| r.rmse),
    ("MAE", Better::Lower, |r| r.mae),
    ("ROI (%)", Better::Higher, |r| r.total_roi_pct),
    ("Sharpe", Better::Higher, |r| r.sharpe),
    ("Max DD (%)", Better::Higher, |r| r.max_drawdown_pct),
    ("DA (%)", Better::Higher, |r| r.directional_accuracy_pct),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub metric: &'static str,
    pub values: Vec<f64>,
    /// Columns holding the best value (several on ties, none if all NaN).
    pub best: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub asset: String,
    pub models: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

impl Comparison {
    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// Name of the (first) best model for `metric`.
    pub fn best_model(&self, metric: &str) -> Option<&str> {
        let row = self.row(metric)?;
        row.best.first().map(|&i| self.models[i].as_str())
    }

    /// Fixed-width text table; best values carry a trailing `*`.
    pub fn render(&self) -> String {
        let mut header = vec![format!("Metric ({})", self.asset)];
        header.extend(self.models.iter().cloned());
        let mut cells: Vec<Vec<String>> = vec![header];
        for row in &self.rows {
            let mut line = vec![row.metric.to_string()];
            for (i, v) in row.values.iter().enumerate() {
                let mark = if row.best.contains(&i) { "*" } else { "" };
                let text = if row.metric.contains("MSE") || row.metric == "MAE" {
                    format!("{v:.6e}{mark}")
                } else {
                    format!("{v:.2}{mark}")
                };
                line.push(text);
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (ri, r) in cells.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if ri == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Lays reports side by side, one column per report.
pub fn compare(reports: &[BacktestReport]) -> Result<Comparison> {
    let first = reports.first().ok_or_else(|| Error::EmptyData("no reports to compare".into()))?;
    let mut warnings = Vec::new();
    let mut assets: Vec<&str> = reports.iter().map(|r| r.asset.as_str()).collect();
    assets.sort_unstable();
    assets.dedup();
    if assets.iter().any(|a| *a != first.asset) {
        let msg = format!("reports cover different assets: {}", assets.join(", "));
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let rows = METRICS
        .iter()
        .map(|&(metric, better, get)| {
            let values: Vec<f64> = reports.iter().map(get).collect();
            let finite = values.iter().copied().filter(|v| !v.is_nan());
            let target = match better {
                Better::Lower => finite.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v)))),
                Better::Higher => finite.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
            };
            let best = target.map_or_else(Vec::new, |t| {
                values.iter().enumerate().filter(|(_, v)| **v == t).map(|(i, _)| i).collect()
            });
            ComparisonRow { metric, values, best }
        })
        .collect();
    Ok(Comparison {
        asset: if warnings.is_empty() { first.asset.clone() } else { "mixed".into() },
        models: reports.iter().map(|r| r.model.clone()).collect(),
        rows,
        warnings,
    })
}
