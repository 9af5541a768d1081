use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Autoregression `x_t = c + sum_i phi_i x_{t-i}` on the `d`-times
/// differenced series, fit by ordinary least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    pub p: usize,
    pub d: usize,
    pub intercept: f64,
    /// `phi[i]` multiplies lag `i + 1`.
    pub phi: Vec<f64>,
}

impl ArModel {
    /// `key = value` lines: p, d, q, intercept, phi1..phip.
    pub fn to_text(&self) -> String {
        let mut out = format!("p = {}\nd = {}\nq = 0\nintercept = {:?}\n", self.p, self.d, self.intercept);
        for (i, v) in self.phi.iter().enumerate() {
            let _ = writeln!(out, "phi{} = {v:?}", i + 1);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key = value, got {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: std::str::FromStr>(kv: &std::collections::HashMap<String, String>, k: &str) -> Result<T> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("missing key {k}")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {k}")))
        }
        let p: usize = get(&kv, "p")?;
        if get::<usize>(&kv, "q")? != 0 {
            return Err(Error::Format("moving-average terms are not supported".into()));
        }
        let phi = (1..=p).map(|i| get(&kv, &format!("phi{i}"))).collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            p,
            d: get(&kv, "d")?,
            intercept: get(&kv, "intercept")?,
            phi,
        })
    }
}

fn difference(x: &[f64], d: usize) -> Vec<f64> {
    let mut v = x.to_vec();
    for _ in 0..d {
        v = v.windows(2).map(|w| w[1] - w[0]).collect();
    }
    v
}

/// Least-squares fit of an AR(`p`) model with `d` differences.
///
/// A constant (differenced) series gives zero lag coefficients with the
/// intercept equal to the constant; any other rank-deficient design is
/// reported as [`Error::Singular`].
pub fn fit_ar(train: &[f64], p: usize, d: usize) -> Result<ArModel> {
    if p == 0 {
        return Err(Error::InvalidParameter("AR order p must be >= 1".into()));
    }
    if train.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("AR training series contains non-finite values".into()));
    }
    if train.len() < p + 2 + d {
        return Err(Error::InsufficientData {
            needed: p + 2 + d,
            available: train.len(),
        });
    }
    let x = difference(train, d);
    if x.iter().all(|&v| v == x[0]) {
        return Ok(ArModel {
            p,
            d,
            intercept: x[0],
            phi: vec![0.0; p],
        });
    }
    let rows = x.len() - p;
    // Centering the design removes the intercept column and improves conditioning.
    let y: Vec<f64> = x[p..].to_vec();
    let y_mean = y.iter().sum::<f64>() / rows as f64;
    let mut means = vec![0.0; p];
    let mut a = vec![0.0; rows * p];
    for j in 0..p {
        let col: Vec<f64> = (0..rows).map(|t| x[p + t - j - 1]).collect();
        means[j] = col.iter().sum::<f64>() / rows as f64;
        for t in 0..rows {
            a[t * p + j] = col[t] - means[j];
        }
    }
    let mut b: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let phi = least_squares(&mut a, rows, p, &mut b)?;
    let intercept = y_mean - phi.iter().zip(&means).map(|(f, m)| f * m).sum::<f64>();
    Ok(ArModel { p, d, intercept, phi })
}

/// Householder QR solve of `min |A x - b|` for row-major `A` (`m x n`).
fn least_squares(a: &mut [f64], m: usize, n: usize, b: &mut [f64]) -> Result<Vec<f64>> {
    let scale = (0..n)
        .map(|j| (0..m).map(|i| a[i * n + j].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let tol = scale * 1e-12 * m.max(n) as f64;
    for k in 0..n {
        let norm = (k..m).map(|i| a[i * n + k].powi(2)).sum::<f64>().sqrt();
        if norm <= tol {
            return Err(Error::Singular(format!(
                "lag matrix is rank deficient at column {} (norm {norm:e})",
                k + 1
            )));
        }
        let alpha = if a[k * n + k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i * n + k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        for j in k..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * a[i * n + j]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                a[i * n + j] -= f * v[i - k];
            }
        }
        let dot: f64 = (k..m).map(|i| v[i - k] * b[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in k..m {
            b[i] -= f * v[i - k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k * n + j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k * n + k];
    }
    Ok(x)
}

/// One-step forecast following the last value of `history`.
pub fn predict_ar(model: &ArModel, history: &[f64]) -> Result<f64> {
    let needed = model.p + model.d;
    if history.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            available: history.len(),
        });
    }
    let tail = &history[history.len() - needed..];
    // levels[j] is the j-times differenced tail.
    let levels: Vec<Vec<f64>> = (0..=model.d).map(|j| difference(tail, j)).collect();
    let x = &levels[model.d];
    let mut next = model.intercept;
    for (i, f) in model.phi.iter().enumerate() {
        next += f * x[x.len() - 1 - i];
    }
    for j in (0..model.d).rev() {
        next += levels[j].last().copied().unwrap_or(0.0);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ar_series(phi: &[f64], init: &[f64], n: usize) -> Vec<f64> {
        let mut x = init.to_vec();
        while x.len() < n {
            let t = x.len();
            x.push(phi.iter().enumerate().map(|(i, f)| f * x[t - 1 - i]).sum());
        }
        x
    }

    #[test]
    fn recovers_ar1() {
        let x = ar_series(&[0.5], &[1.0], 40);
        let m = fit_ar(&x, 1, 0).unwrap();
        assert!((m.phi[0] - 0.5).abs() < 1e-8, "{:?}", m);
        assert!(m.intercept.abs() < 1e-8);
        assert!((predict_ar(&m, &x).unwrap() - 0.5 * x[39]).abs() < 1e-12);
    }

    #[test]
    fn recovers_ar2() {
        let x = ar_series(&[0.3, 0.2], &[1.0, -0.5], 60);
        let m = fit_ar(&x, 2, 0).unwrap();
        assert!((m.phi[0] - 0.3).abs() < 1e-6 && (m.phi[1] - 0.2).abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn constant_series_predicts_constant() {
        let m = fit_ar(&[0.7; 20], 2, 0).unwrap();
        assert_eq!(m.phi, vec![0.0, 0.0]);
        assert_eq!(predict_ar(&m, &[0.7; 5]).unwrap(), 0.7);
    }

    #[test]
    fn rank_deficiency_is_singular() {
        // alternating series: lag 2 equals the current value, lag 1 its negation
        let x: Vec<f64> = (0..30).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(matches!(fit_ar(&x, 2, 0), Err(Error::Singular(_))));
    }

    #[test]
    fn preconditions() {
        assert!(fit_ar(&[1.0, 2.0, 3.0], 2, 0).is_err());
        assert!(fit_ar(&[1.0, 2.0, 3.0, 5.0], 0, 0).is_err());
        let m = fit_ar(&[1.0, 2.0, 3.0, 5.0, 4.0, 6.0], 2, 0).unwrap();
        assert!(predict_ar(&m, &[1.0]).is_err());
    }

    #[test]
    fn differencing_integrates_back() {
        // a linear trend has constant first differences
        let x: Vec<f64> = (0..20).map(|t| 2.0 + 0.5 * t as f64).collect();
        let m = fit_ar(&x, 1, 1).unwrap();
        assert!((predict_ar(&m, &x).unwrap() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let m = ArModel { p: 2, d: 0, intercept: 1e-4, phi: vec![0.1 + 0.2, -0.05] };
        let text = m.to_text();
        assert!(text.contains("q = 0"));
        assert_eq!(ArModel::from_text(&text).unwrap(), m);
    }

    proptest! {
        #[test]
        fn scale_equivariance(seed in 0u64..1000, c in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0]) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let a = fit_ar(&x, 2, 0).unwrap();
            let b = fit_ar(&xs, 2, 0).unwrap();
            prop_assert!((b.intercept - c * a.intercept).abs() < 1e-8 * c.abs().max(1.0));
            for (pa, pb) in a.phi.iter().zip(&b.phi) {
                prop_assert!((pa - pb).abs() < 1e-8);
            }
        }
    }
}
