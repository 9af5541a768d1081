//! Technical indicators and assembly of the 16-channel feature matrix.
//!
//! Every indicator returns a vector aligned with its input; positions before
//! the indicator is defined hold `NaN`. All indicators are causal.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::market_data::{log_returns, OhlcvSeries};

/// Canonical channel order of the default pipeline.
pub const CHANNELS: [&str; 16] = [
    "open",
    "high",
    "low",
    "close",
    "base_volume",
    "quote_volume",
    "trade_count",
    "sma50",
    "ema21",
    "rsi14",
    "cci20",
    "atr14",
    "macd_line",
    "macd_signal",
    "macd_hist",
    "log_return",
];

/// Index of `log_return` in [`CHANNELS`].
pub const TARGET_CHANNEL: usize = 15;

/// Rows dropped from the start of the series; SMA(50) is the longest warm-up.
pub const WARMUP_ROWS: usize = 50;

/// Dense `T x D` matrix of named channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Vec<f64>,
    pub channel_names: Vec<String>,
    /// One date per row when the matrix came from dated bars.
    pub dates: Option<Vec<NaiveDate>>,
    /// Index into the source series of this matrix's first row.
    pub first_valid_row: usize,
}

impl FeatureMatrix {
    pub fn new(
        values: Vec<f64>,
        channel_names: Vec<String>,
        dates: Option<Vec<NaiveDate>>,
    ) -> Result<Self> {
        let d = channel_names.len();
        if d == 0 || !values.len().is_multiple_of(d) {
            return Err(Error::shape("feature_matrix", &[values.len()], &[d]));
        }
        let unique: HashSet<&String> = channel_names.iter().collect();
        if unique.len() != d {
            return Err(Error::InvalidParameter("channel names must be unique".into()));
        }
        if let Some(dates) = &dates {
            if dates.len() != values.len() / d {
                return Err(Error::shape("feature_matrix dates", &[dates.len()], &[values.len() / d]));
            }
        }
        Ok(Self {
            values,
            channel_names,
            dates,
            first_valid_row: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.channel_names.len()
    }

    pub fn cols(&self) -> usize {
        self.channel_names.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.cols();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.cols() + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.cols()).copied().collect()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.dates.is_some() {
            out.push_str("date,");
        }
        out.push_str(&self.channel_names.join(","));
        out.push('\n');
        for t in 0..self.rows() {
            if let Some(dates) = &self.dates {
                let _ = write!(out, "{},", dates[t]);
            }
            let row: Vec<String> = self.row(t).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Parse { row: 1, message: e.to_string() })?
            .clone();
        let dated = header.get(0) == Some("date");
        let names: Vec<String> = header.iter().skip(usize::from(dated)).map(String::from).collect();
        let mut values = Vec::new();
        let mut dates = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
            let mut fields = rec.iter();
            if dated {
                let raw = fields.next().unwrap_or("");
                dates.push(NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| Error::Parse {
                    row,
                    message: format!("bad date {raw:?}"),
                })?);
            }
            for raw in fields {
                values.push(raw.parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    message: format!("not a number: {raw:?}"),
                })?);
            }
        }
        FeatureMatrix::new(values, names, dated.then_some(dates))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn need(available: usize, needed: usize) -> Result<()> {
    if available < needed {
        return Err(Error::InsufficientData { needed, available });
    }
    Ok(())
}

/// Simple moving average, defined from index `n - 1`.
pub fn sma(x: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("SMA window must be >= 1".into()));
    }
    need(x.len(), n)?;
    let mut out = vec![f64::NAN; x.len()];
    for t in n - 1..x.len() {
        out[t] = x[t + 1 - n..=t].iter().sum::<f64>() / n as f64;
    }
    Ok(out)
}

/// Exponential moving average with `k = 2 / (n + 1)`, seeded with `x[0]`.
pub fn ema(x: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("EMA period must be >= 1".into()));
    }
    need(x.len(), 1)?;
    let k = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(x.len());
    let mut e = x[0];
    out.push(e);
    for &v in &x[1..] {
        e += k * (v - e);
        out.push(e);
    }
    Ok(out)
}

/// Wilder smoothing of `values[1..]`: the value at index `n` is the mean of
/// `values[1..=n]`, after which `avg = (avg * (n - 1) + v) / n`.
fn wilder(values: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; values.len()];
    let mut avg = values[1..=n].iter().sum::<f64>() / n as f64;
    out[n] = avg;
    for t in n + 1..values.len() {
        avg = (avg * (n as f64 - 1.0) + values[t]) / n as f64;
        out[t] = avg;
    }
    out
}

/// Relative strength index with Wilder smoothing, defined from index `n`.
pub fn rsi(closes: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("RSI period must be >= 1".into()));
    }
    need(closes.len(), n + 1)?;
    let mut gains = vec![0.0; closes.len()];
    let mut losses = vec![0.0; closes.len()];
    for t in 1..closes.len() {
        let diff = closes[t] - closes[t - 1];
        gains[t] = diff.max(0.0);
        losses[t] = (-diff).max(0.0);
    }
    let avg_gain = wilder(&gains, n);
    let avg_loss = wilder(&losses, n);
    Ok(avg_gain
        .iter()
        .zip(&avg_loss)
        .map(|(&g, &l)| rsi_value(g, l))
        .collect())
}

fn rsi_value(gain: f64, loss: f64) -> f64 {
    if gain.is_nan() {
        f64::NAN
    } else if loss == 0.0 && gain == 0.0 {
        50.0
    } else if loss == 0.0 {
        100.0
    } else if gain == 0.0 {
        0.0
    } else {
        100.0 - 100.0 / (1.0 + gain / loss)
    }
}

fn check_aligned(high: &[f64], low: &[f64], close: &[f64]) -> Result<()> {
    if high.len() != low.len() || low.len() != close.len() {
        return Err(Error::shape("hlc", &[high.len(), low.len()], &[close.len()]));
    }
    Ok(())
}

/// Commodity channel index over the typical price, defined from index `n - 1`.
/// A window with zero mean deviation yields 0.
pub fn cci(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Result<Vec<f64>> {
    check_aligned(high, low, close)?;
    if n == 0 {
        return Err(Error::InvalidParameter("CCI period must be >= 1".into()));
    }
    need(close.len(), n)?;
    let tp: Vec<f64> = (0..close.len())
        .map(|t| (high[t] + low[t] + close[t]) / 3.0)
        .collect();
    let mut out = vec![f64::NAN; tp.len()];
    for t in n - 1..tp.len() {
        let win = &tp[t + 1 - n..=t];
        let mean = win.iter().sum::<f64>() / n as f64;
        let dev = win.iter().map(|v| (v - mean).abs()).sum::<f64>() / n as f64;
        out[t] = if dev == 0.0 {
            0.0
        } else {
            (tp[t] - mean) / (0.015 * dev)
        };
    }
    Ok(out)
}

/// Average true range with Wilder smoothing, defined from index `n`.
pub fn atr(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Result<Vec<f64>> {
    check_aligned(high, low, close)?;
    if n == 0 {
        return Err(Error::InvalidParameter("ATR period must be >= 1".into()));
    }
    need(close.len(), n + 1)?;
    let mut tr = vec![f64::NAN; close.len()];
    for t in 1..close.len() {
        let prev = close[t - 1];
        tr[t] = (high[t] - low[t])
            .max((high[t] - prev).abs())
            .max((low[t] - prev).abs());
    }
    Ok(wilder(&tr, n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Macd {
    pub line: Vec<f64>,
    pub signal: Vec<f64>,
    pub histogram: Vec<f64>,
}

pub fn macd(closes: &[f64], fast: usize, slow: usize, signal: usize) -> Result<Macd> {
    if fast >= slow {
        return Err(Error::InvalidParameter(format!(
            "MACD fast period {fast} must be below slow period {slow}"
        )));
    }
    let fast_ema = ema(closes, fast)?;
    let slow_ema = ema(closes, slow)?;
    let line: Vec<f64> = fast_ema.iter().zip(&slow_ema).map(|(f, s)| f - s).collect();
    let signal = ema(&line, signal)?;
    let histogram = line.iter().zip(&signal).map(|(l, s)| l - s).collect();
    Ok(Macd {
        line,
        signal,
        histogram,
    })
}

/// Raw bars plus indicators, warm-up trimmed, in [`CHANNELS`] order.
pub fn build_feature_matrix(series: &OhlcvSeries) -> Result<FeatureMatrix> {
    let n = series.len();
    need(n, WARMUP_ROWS + 2)?;
    let bars = &series.bars;
    let pick = |f: fn(&crate::market_data::OhlcvBar) -> f64| bars.iter().map(f).collect::<Vec<_>>();
    let open = pick(|b| b.open);
    let high = pick(|b| b.high);
    let low = pick(|b| b.low);
    let close = pick(|b| b.close);
    let base_volume = pick(|b| b.base_volume);
    let quote_volume = pick(|b| b.quote_volume);
    let trades = pick(|b| b.trade_count as f64);

    let sma50 = sma(&close, 50)?;
    let ema21 = ema(&close, 21)?;
    let rsi14 = rsi(&close, 14)?;
    let cci20 = cci(&high, &low, &close, 20)?;
    let atr14 = atr(&high, &low, &close, 14)?;
    let m = macd(&close, 12, 26, 9)?;
    let mut ret = vec![f64::NAN];
    ret.extend(log_returns(&close)?);

    let columns: [&[f64]; 16] = [
        &open,
        &high,
        &low,
        &close,
        &base_volume,
        &quote_volume,
        &trades,
        &sma50,
        &ema21,
        &rsi14,
        &cci20,
        &atr14,
        &m.line,
        &m.signal,
        &m.histogram,
        &ret,
    ];
    let mut values = Vec::with_capacity((n - WARMUP_ROWS) * columns.len());
    for t in WARMUP_ROWS..n {
        values.extend(columns.iter().map(|c| c[t]));
    }
    debug_assert!(values.iter().all(|v| v.is_finite()));
    let dates = bars[WARMUP_ROWS..].iter().map(|b| b.open_time).collect();
    let mut out = FeatureMatrix::new(
        values,
        CHANNELS.iter().map(|s| s.to_string()).collect(),
        Some(dates),
    )?;
    out.first_valid_row = WARMUP_ROWS;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::OhlcvBar;

    fn close_to(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    pub(crate) fn flat_series(n: usize) -> OhlcvSeries {
        let start = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        let bars = (0..n)
            .map(|i| OhlcvBar {
                open_time: start + chrono::Days::new(i as u64),
                open: 100.0,
                high: 100.0,
                low: 100.0,
                close: 100.0,
                base_volume: 5.0,
                quote_volume: 500.0,
                trade_count: 7,
            })
            .collect();
        OhlcvSeries::new("FLAT", bars).unwrap()
    }

    #[test]
    fn sma_examples() {
        let s = sma(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert!(s[0].is_nan());
        assert_eq!(&s[1..], &[1.5, 2.5, 3.5]);
        assert_eq!(sma(&[3.0; 5], 3).unwrap()[2..], [3.0; 3]);
        let x = [1.0, -2.0, 7.5];
        assert_eq!(sma(&x, 1).unwrap(), x.to_vec());
        assert!(matches!(sma(&x, 4), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema(&[4.0; 6], 5).unwrap(), vec![4.0; 6]);
        let e = ema(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!(close_to(e[1], 5.0 / 3.0, 1e-15));
        assert!(close_to(e[2], 23.0 / 9.0, 1e-15));
        let x = [1.0, 5.0, -3.0];
        assert_eq!(ema(&x, 1).unwrap(), x.to_vec());
        assert!(ema(&[], 3).is_err());
    }

    #[test]
    fn rsi_conventions() {
        let up: Vec<f64> = (1..=30).map(f64::from).collect();
        let r = rsi(&up, 14).unwrap();
        assert!(r[..14].iter().all(|v| v.is_nan()));
        assert!(r[14..].iter().all(|&v| v == 100.0));
        let down: Vec<f64> = up.iter().rev().copied().collect();
        assert!(rsi(&down, 14).unwrap()[14..].iter().all(|&v| v == 0.0));
        assert!(rsi(&[9.0; 20], 14).unwrap()[14..].iter().all(|&v| v == 50.0));
        assert!(rsi(&[1.0; 14], 14).is_err());
    }

    #[test]
    fn cci_zero_cases() {
        let c = [10.0; 25];
        assert!(cci(&c, &c, &c, 20).unwrap()[19..].iter().all(|&v| v == 0.0));
        // symmetric window: last typical price equals the window mean
        let tp = [1.0, 3.0, 2.0];
        let out = cci(&tp, &tp, &tp, 3).unwrap();
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn atr_gap_decays_geometrically() {
        let n = 14;
        let mut h = vec![100.0; 40];
        let mut l = vec![100.0; 40];
        let c = vec![100.0; 40];
        // one wide bar at index 20, flat elsewhere
        h[20] = 104.0;
        l[20] = 98.0;
        let a = atr(&h, &l, &c, n).unwrap();
        assert!(a[n..20].iter().all(|&v| v == 0.0));
        assert!(close_to(a[20], 6.0 / n as f64, 1e-15));
        // day 21 has zero range again: TR back to 0
        for t in 21..40 {
            let expected = a[20] * ((n as f64 - 1.0) / n as f64).powi((t - 20) as i32);
            assert!(close_to(a[t], expected, 1e-12), "t={t}");
        }
    }

    #[test]
    fn macd_constant_and_identity() {
        let m = macd(&[50.0; 40], 12, 26, 9).unwrap();
        assert!(m.line.iter().chain(&m.signal).chain(&m.histogram).all(|&v| v == 0.0));
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin() * 3.0 + 20.0).collect();
        let m = macd(&x, 12, 26, 9).unwrap();
        for t in 0..40 {
            assert_eq!(m.histogram[t], m.line[t] - m.signal[t]);
        }
        assert!(macd(&x, 26, 12, 9).is_err());
    }

    #[test]
    fn flat_bars_feature_matrix() {
        let fm = build_feature_matrix(&flat_series(60)).unwrap();
        assert_eq!(fm.rows(), 10);
        assert_eq!(fm.cols(), 16);
        assert_eq!(fm.channel_names, CHANNELS.to_vec());
        assert_eq!(fm.first_valid_row, 50);
        for t in 0..fm.rows() {
            assert_eq!(fm.get(t, 9), 50.0);
            assert_eq!(fm.get(t, 10), 0.0);
            assert_eq!(fm.get(t, 11), 0.0);
            assert_eq!(&fm.row(t)[12..], &[0.0, 0.0, 0.0, 0.0]);
            assert_eq!(fm.get(t, 7), 100.0);
        }
        assert!(build_feature_matrix(&flat_series(51)).is_err());
        assert_eq!(build_feature_matrix(&flat_series(52)).unwrap().rows(), 2);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let mut fm = build_feature_matrix(&flat_series(55)).unwrap();
        fm.values[3] = 0.1 + 0.2;
        fm.values[17] = -1.0e-300;
        let back = FeatureMatrix::from_csv(&fm.to_csv()).unwrap();
        assert_eq!(back.values.len(), fm.values.len());
        for (a, b) in back.values.iter().zip(&fm.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.dates, fm.dates);
        assert_eq!(back.channel_names, fm.channel_names);
    }
}
