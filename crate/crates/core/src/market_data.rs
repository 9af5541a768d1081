//! Daily kline ingestion, log returns, chronological splitting, leakage-free
//! min-max scaling and sliding windows.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use crate::error::{Error, Result};
use crate::indicators::FeatureMatrix;

/// One daily candle.
#[derive(Debug, Clone, PartialEq)]
pub struct OhlcvBar {
    pub open_time: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub base_volume: f64,
    pub quote_volume: f64,
    pub trade_count: u64,
}

impl OhlcvBar {
    fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be a positive finite price, got {v}"));
            }
        }
        if self.high < self.low {
            return Err(format!("high {} < low {}", self.high, self.low));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!(
                "low {} above min(open, close) {}",
                self.low,
                self.open.min(self.close)
            ));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!(
                "high {} below max(open, close) {}",
                self.high,
                self.open.max(self.close)
            ));
        }
        for (name, v) in [("volume", self.base_volume), ("quote_asset_volume", self.quote_volume)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

/// A run of missing calendar days between two consecutive bars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gap {
    pub after: NaiveDate,
    pub missing_days: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OhlcvSeries {
    pub symbol: String,
    pub bars: Vec<OhlcvBar>,
    /// Calendar gaps found while loading. They are reported, never filled.
    pub gaps: Vec<Gap>,
}

impl OhlcvSeries {
    /// Builds a series from bars already in memory, checking ordering and
    /// bar invariants the same way the CSV loader does.
    pub fn new(symbol: impl Into<String>, bars: Vec<OhlcvBar>) -> Result<Self> {
        if bars.is_empty() {
            return Err(Error::EmptyData("no bars".into()));
        }
        for (i, bar) in bars.iter().enumerate() {
            bar.validate()
                .map_err(|message| Error::InvalidBar { row: i + 1, message })?;
        }
        let gaps = check_order(&bars, |i| i + 1)?;
        Ok(Self {
            symbol: symbol.into(),
            bars,
            gaps,
        })
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    pub fn with_symbol(mut self, symbol: impl Into<String>) -> Self {
        self.symbol = symbol.into();
        self
    }

    /// Loads a kline CSV file. The symbol is taken from the file name up to
    /// the first `-`, `_` or `.` (Binance exports look like
    /// `BTCUSDT-1d-2024-01.csv`).
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let symbol = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.split(['-', '_', '.']).next())
            .unwrap_or("UNKNOWN")
            .to_string();
        Ok(parse_klines(&text)?.with_symbol(symbol))
    }
}

fn check_order(bars: &[OhlcvBar], row_of: impl Fn(usize) -> usize) -> Result<Vec<Gap>> {
    let mut gaps = Vec::new();
    for i in 1..bars.len() {
        let prev = bars[i - 1].open_time;
        let cur = bars[i].open_time;
        let days = (cur - prev).num_days();
        if days <= 0 {
            return Err(Error::Ordering {
                row: row_of(i),
                timestamp: cur.to_string(),
                previous: if days == 0 {
                    format!("{prev} (duplicate)")
                } else {
                    prev.to_string()
                },
            });
        }
        if days > 1 {
            gaps.push(Gap {
                after: prev,
                missing_days: days - 1,
            });
        }
    }
    Ok(gaps)
}

fn parse_open_time(field: &str) -> Option<NaiveDate> {
    if let Ok(raw) = field.parse::<i64>() {
        // Binance switched spot klines to microseconds in 2025.
        let millis = if raw.abs() >= 100_000_000_000_000 {
            raw / 1000
        } else {
            raw
        };
        return DateTime::from_timestamp_millis(millis).map(|d| d.date_naive());
    }
    if let Ok(d) = NaiveDate::parse_from_str(field, "%Y-%m-%d") {
        return Some(d);
    }
    if let Ok(d) = DateTime::parse_from_rfc3339(field) {
        return Some(d.naive_utc().date());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(field, fmt).ok())
        .map(|d| d.date())
}

fn parse_trade_count(field: &str) -> Option<u64> {
    field.parse::<u64>().ok().or_else(|| {
        let v: f64 = field.parse().ok()?;
        (v.is_finite() && v >= 0.0 && v.fract() == 0.0).then_some(v as u64)
    })
}

/// Parses Binance-layout kline CSV text (header optional).
///
/// Columns: open_time, open, high, low, close, volume, close_time,
/// quote_asset_volume, number_of_trades, then three ignored columns which
/// may be absent.
pub fn parse_klines(csv_text: &str) -> Result<OhlcvSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());

    let mut bars = Vec::new();
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let first = record.get(0).unwrap_or("");
        let open_time = match parse_open_time(first) {
            Some(d) => d,
            None if idx == 0 => continue,
            None => {
                return Err(Error::Parse {
                    row,
                    message: format!("unparseable open_time {first:?}"),
                })
            }
        };
        if record.len() < 9 {
            return Err(Error::Parse {
                row,
                message: format!("expected at least 9 columns, found {}", record.len()),
            });
        }
        let num = |col: usize, name: &str| -> Result<f64> {
            let raw = &record[col];
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("column {name}: not a number: {raw:?}"),
            })
        };
        let bar = OhlcvBar {
            open_time,
            open: num(1, "open")?,
            high: num(2, "high")?,
            low: num(3, "low")?,
            close: num(4, "close")?,
            base_volume: num(5, "volume")?,
            quote_volume: num(7, "quote_asset_volume")?,
            trade_count: parse_trade_count(&record[8]).ok_or_else(|| Error::Parse {
                row,
                message: format!("column number_of_trades: not a count: {:?}", &record[8]),
            })?,
        };
        bar.validate()
            .map_err(|message| Error::InvalidBar { row, message })?;
        bars.push(bar);
        rows.push(row);
    }
    if bars.is_empty() {
        return Err(Error::EmptyData("kline CSV contains no data rows".into()));
    }
    let gaps = check_order(&bars, |i| rows[i])?;
    Ok(OhlcvSeries {
        symbol: "UNKNOWN".into(),
        bars,
        gaps,
    })
}

/// `out[t] = ln(closes[t+1] / closes[t])`; one element shorter than the input.
pub fn log_returns(closes: &[f64]) -> Result<Vec<f64>> {
    if closes.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: closes.len(),
        });
    }
    if let Some(p) = closes.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::Domain(format!("log return of nonpositive price {p}")));
    }
    Ok(closes.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

/// Row boundaries: train `[0, train_end)`, validation `[train_end, val_end)`,
/// test `[val_end, total)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitIndex {
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
}

impl SplitIndex {
    pub fn train(&self) -> std::ops::Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> std::ops::Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> std::ops::Range<usize> {
        self.val_end..self.total
    }
}

/// Floors train and validation sizes; whatever remains goes to test.
pub fn chronological_split(total: usize, ratios: SplitRatios) -> Result<SplitIndex> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(r.is_finite() && *r > 0.0))
        || (train + val + test - 1.0).abs() > 1e-9
    {
        return Err(Error::Split(format!(
            "ratios must be positive and sum to 1, got ({train}, {val}, {test})"
        )));
    }
    if total < 10 {
        return Err(Error::Split(format!("need at least 10 rows, have {total}")));
    }
    // The epsilon keeps products like 0.7 * 100 = 69.999... on the right side.
    let n_train = (train * total as f64 + 1e-9).floor() as usize;
    let n_val = (val * total as f64 + 1e-9).floor() as usize;
    let train_end = n_train;
    let val_end = n_train + n_val;
    if n_train == 0 || n_val == 0 || val_end >= total {
        return Err(Error::Split(format!(
            "{total} rows cannot give every split at least one row"
        )));
    }
    Ok(SplitIndex {
        train_end,
        val_end,
        total,
    })
}

/// Per-channel min-max scaler fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub channel_names: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Channels whose training range is zero; they scale to 0.0.
    pub degenerate: Vec<bool>,
}

impl MinMaxScaler {
    pub fn fit(matrix: &FeatureMatrix, split: &SplitIndex) -> Result<Self> {
        fit_minmax(matrix, split)
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    pub fn scale(&self, channel: usize, x: f64) -> f64 {
        if self.degenerate[channel] {
            0.0
        } else {
            (x - self.min[channel]) / (self.max[channel] - self.min[channel])
        }
    }

    pub fn unscale(&self, channel: usize, y: f64) -> f64 {
        if self.degenerate[channel] {
            self.min[channel]
        } else {
            y * (self.max[channel] - self.min[channel]) + self.min[channel]
        }
    }

    fn check(&self, matrix: &FeatureMatrix) -> Result<()> {
        if matrix.cols() != self.channels() {
            return Err(Error::shape(
                "minmax",
                &[self.channels()],
                &[matrix.rows(), matrix.cols()],
            ));
        }
        Ok(())
    }

    fn map(&self, matrix: &FeatureMatrix, f: impl Fn(usize, f64) -> f64) -> Result<FeatureMatrix> {
        self.check(matrix)?;
        let d = matrix.cols();
        let mut out = matrix.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = f(i % d, *v);
        }
        Ok(out)
    }

    pub fn apply(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.map(matrix, |c, x| self.scale(c, x))
    }

    pub fn invert(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.map(matrix, |c, y| self.unscale(c, y))
    }

    /// One line per channel: `name = min,max,degenerate`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# min-max scaler v1\n");
        for c in 0..self.channels() {
            let _ = writeln!(
                out,
                "{} = {:?},{:?},{}",
                self.channel_names[c], self.min[c], self.max[c], self.degenerate[c]
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = MinMaxScaler {
            channel_names: Vec::new(),
            min: Vec::new(),
            max: Vec::new(),
            degenerate: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse {
                row: i + 1,
                message: format!("malformed scaler line {line:?}"),
            };
            let (name, rest) = line.split_once('=').ok_or_else(bad)?;
            let parts: Vec<&str> = rest.trim().split(',').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            s.channel_names.push(name.trim().to_string());
            s.min.push(parts[0].parse().map_err(|_| bad())?);
            s.max.push(parts[1].parse().map_err(|_| bad())?);
            s.degenerate.push(parts[2].parse().map_err(|_| bad())?);
        }
        Ok(s)
    }
}

pub fn fit_minmax(matrix: &FeatureMatrix, split: &SplitIndex) -> Result<MinMaxScaler> {
    if split.train_end == 0 || split.train_end > matrix.rows() {
        return Err(Error::EmptyData(format!(
            "training slice [0, {}) of a {}-row matrix",
            split.train_end,
            matrix.rows()
        )));
    }
    let d = matrix.cols();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for t in split.train() {
        for (c, &v) in matrix.row(t).iter().enumerate() {
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
    }
    let degenerate = min.iter().zip(&max).map(|(lo, hi)| hi <= lo).collect();
    Ok(MinMaxScaler {
        channel_names: matrix.channel_names.clone(),
        min,
        max,
        degenerate,
    })
}

/// One training/evaluation sample borrowed from a feature matrix.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    /// First input row.
    pub start: usize,
    /// `SL x D` row-major input rows `[start, start + SL)`.
    pub input: &'a [f64],
    /// Row `start + SL`, the one-step-ahead target.
    pub target: &'a [f64],
}

impl Window<'_> {
    pub fn target_row(&self, window_len: usize) -> usize {
        self.start + window_len
    }
}

/// All one-step-ahead windows of length `window_len`; sample `k` reads rows
/// `[k, k + window_len)` and targets row `k + window_len`.
pub fn make_windows(matrix: &FeatureMatrix, window_len: usize) -> Result<Vec<Window<'_>>> {
    let t = matrix.rows();
    if window_len == 0 {
        return Err(Error::InvalidParameter("window length must be >= 1".into()));
    }
    if t <= window_len {
        return Err(Error::InsufficientData {
            needed: window_len + 1,
            available: t,
        });
    }
    let d = matrix.cols();
    Ok((0..t - window_len)
        .map(|k| Window {
            start: k,
            input: &matrix.values[k * d..(k + window_len) * d],
            target: matrix.row(k + window_len),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(date: &str, o: f64, h: f64, l: f64, c: f64) -> String {
        format!("{date},{o},{h},{l},{c},10,0,1000,42,0,0,0\n")
    }

    #[test]
    fn parses_a_single_row() {
        let s = parse_klines(&row("2024-01-01", 99.0, 101.0, 98.0, 100.0)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.bars[0].close, 100.0);
        assert_eq!(s.bars[0].trade_count, 42);
        assert_eq!(s.bars[0].quote_volume, 1000.0);
    }

    #[test]
    fn header_and_millisecond_timestamps() {
        let text = "open_time,open,high,low,close,volume,close_time,quote_asset_volume,number_of_trades,taker_buy_base,taker_buy_quote,ignore\n\
                    1704067200000,1,2,0.5,1.5,3,1704153599999,4,5,0,0,0\n\
                    1704153600000,1.5,2,1,1.8,3,1704239999999,4,5,0,0,0\n";
        let s = parse_klines(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.bars[0].open_time, NaiveDate::from_ymd_opt(2024, 1, 1).unwrap());
        assert!(s.gaps.is_empty());
    }

    #[test]
    fn rejects_descending_and_duplicate_timestamps() {
        let text = row("2024-01-02", 1.0, 2.0, 0.5, 1.0) + &row("2024-01-01", 1.0, 2.0, 0.5, 1.0);
        assert!(matches!(parse_klines(&text), Err(Error::Ordering { row: 2, .. })));
        let text = row("2024-01-01", 1.0, 2.0, 0.5, 1.0) + &row("2024-01-01", 1.0, 2.0, 0.5, 1.0);
        assert!(matches!(parse_klines(&text), Err(Error::Ordering { .. })));
    }

    #[test]
    fn rejects_high_below_low() {
        let text = row("2024-01-01", 1.0, 0.5, 2.0, 1.0);
        assert!(matches!(parse_klines(&text), Err(Error::InvalidBar { row: 1, .. })));
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let text = row("2024-01-01", 1.0, 2.0, 0.5, 1.0) + "2024-01-02,1,abc,0.5,1,1,0,1,1\n";
        match parse_klines(&text) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_klines(""), Err(Error::EmptyData(_))));
    }

    #[test]
    fn gaps_are_recorded_not_filled() {
        let text = row("2024-01-01", 1.0, 2.0, 0.5, 1.0) + &row("2024-01-04", 1.0, 2.0, 0.5, 1.0);
        let s = parse_klines(&text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.gaps, vec![Gap { after: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(), missing_days: 2 }]);
    }

    #[test]
    fn log_return_examples() {
        assert_eq!(log_returns(&[100.0, 100.0]).unwrap(), vec![0.0]);
        assert!((log_returns(&[1.0, 2.0]).unwrap()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((log_returns(&[100.0, 100.0 * e]).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!(matches!(log_returns(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(log_returns(&[1.0]).is_err());
    }

    #[test]
    fn split_examples() {
        let r = SplitRatios::default();
        let s = chronological_split(100, r).unwrap();
        assert_eq!((s.train_end, s.val_end), (70, 90));
        let s = chronological_split(10, r).unwrap();
        assert_eq!((s.train_end, s.val_end), (7, 9));
        // floor rule: 70.7 -> 70, 20.2 -> 20, remainder 11 rows to test
        let s = chronological_split(101, r).unwrap();
        assert_eq!((s.train_end, s.val_end), (70, 90));
        assert!(chronological_split(9, r).is_err());
        let bad = SplitRatios { train: 0.5, val: 0.2, test: 0.2 };
        assert!(chronological_split(100, bad).is_err());
    }

    fn matrix(cols: Vec<Vec<f64>>) -> FeatureMatrix {
        let t = cols[0].len();
        let names = (0..cols.len()).map(|c| format!("c{c}")).collect();
        let mut values = Vec::new();
        for r in 0..t {
            for col in &cols {
                values.push(col[r]);
            }
        }
        FeatureMatrix::new(values, names, None).unwrap()
    }

    #[test]
    fn scaler_examples() {
        let col: Vec<f64> = (0..=10).map(f64::from).chain([100.0, 200.0, 300.0, 400.0]).collect();
        let m = matrix(vec![col, vec![5.0; 15]]);
        let split = SplitIndex { train_end: 11, val_end: 13, total: 15 };
        let s = fit_minmax(&m, &split).unwrap();
        assert_eq!((s.min[0], s.max[0]), (0.0, 10.0));
        assert!(!s.degenerate[0]);
        assert!(s.degenerate[1]);
        assert_eq!(s.scale(0, 5.0), 0.5);
        assert_eq!(s.scale(1, 5.0), 0.0);
        // out-of-range values are not clipped
        let scaled = s.apply(&m).unwrap();
        assert_eq!(scaled.get(14, 0), 40.0);

        let text = s.to_text();
        assert_eq!(MinMaxScaler::from_text(&text).unwrap(), s);
    }

    #[test]
    fn scaler_ignores_test_rows() {
        let base: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let mut perturbed = base.clone();
        for v in &mut perturbed[14..] {
            *v *= 1e6;
        }
        let split = SplitIndex { train_end: 14, val_end: 18, total: 20 };
        let a = fit_minmax(&matrix(vec![base]), &split).unwrap();
        let b = fit_minmax(&matrix(vec![perturbed]), &split).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scaler_channel_mismatch() {
        let m = matrix(vec![vec![1.0, 2.0, 3.0]]);
        let split = SplitIndex { train_end: 2, val_end: 3, total: 3 };
        let s = fit_minmax(&m, &split).unwrap();
        let wide = matrix(vec![vec![1.0; 3], vec![2.0; 3]]);
        assert!(matches!(s.apply(&wide), Err(Error::Shape { .. })));
    }

    #[test]
    fn window_counts() {
        let m = matrix(vec![(0..49).map(f64::from).collect()]);
        let w = make_windows(&m, 48).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].target, &[48.0]);
        let m = matrix(vec![(0..48).map(f64::from).collect()]);
        assert!(matches!(make_windows(&m, 48), Err(Error::InsufficientData { .. })));
        let m = matrix(vec![(0..100).map(f64::from).collect(), vec![0.0; 100]]);
        let w = make_windows(&m, 48).unwrap();
        assert_eq!(w.len(), 52);
        assert_eq!(w[3].input.len(), 96);
        assert_eq!(w[3].input[0], 3.0);
        assert_eq!(w[3].target[0], 51.0);
    }
}
