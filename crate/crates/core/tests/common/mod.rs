#![allow(dead_code)]

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DAY_MS: i64 = 86_400_000;
/// 2021-01-01T00:00:00Z in milliseconds.
pub const START_MS: i64 = 1_609_459_200_000;

/// Box-Muller standard normal draw.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Geometric random-walk daily klines in the 12-column exchange layout.
pub fn random_walk_klines(n: usize, seed: u64) -> String {
    random_walk_klines_from(n, seed, 30_000.0)
}

pub fn random_walk_klines_from(n: usize, seed: u64, first_close: f64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from(
        "open_time,open,high,low,close,volume,close_time,quote_volume,count,taker_buy_volume,taker_buy_quote_volume,ignore\n",
    );
    let mut close = first_close;
    for i in 0..n {
        let open = close;
        close = open * (0.03 * normal(&mut rng)).exp();
        let high = open.max(close) * (1.0 + 0.01 * rng.gen::<f64>());
        let low = open.min(close) * (1.0 - 0.01 * rng.gen::<f64>());
        let volume = 1_000.0 + 500.0 * rng.gen::<f64>();
        let trades: u64 = rng.gen_range(10_000..50_000);
        let t = START_MS + i as i64 * DAY_MS;
        let _ = writeln!(
            out,
            "{t},{open:.2},{high:.2},{low:.2},{close:.2},{volume:.4},{},{:.2},{trades},0,0,0",
            t + DAY_MS - 1,
            volume * close
        );
    }
    out
}
