//! Seeded balancing-price forecasts whose error band widens with lead time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default error growth, 1.5 % per hour of lead.
pub const DEFAULT_ERROR_RATE: f64 = 0.015;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceForecast {
    pub window_start: usize,
    /// Forecast price per lead hour.
    pub prices: Vec<f64>,
    /// Relative error bound applied at each lead hour.
    pub error_bounds: Vec<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, window_start: usize, lead: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ window_start as u64) ^ lead as u64)
}

/// `forecast[h] = actual[start + h]·(1 + e_h)` with `e_h` uniform in
/// `±rate·(h + 1)`; each draw has its own stream keyed by
/// `(seed, window_start, lead)`.
pub fn forecast_bm_prices(actual: &[f64], window_start: usize, window_len: usize, rate: f64, seed: u64) -> PriceForecast {
    let end = (window_start + window_len).min(actual.len());
    let mut prices = Vec::with_capacity(end.saturating_sub(window_start));
    let mut error_bounds = Vec::with_capacity(prices.capacity());
    for (lead, &a) in actual[window_start.min(end)..end].iter().enumerate() {
        let bound = rate * (lead + 1) as f64;
        let e = if bound > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, window_start, lead));
            rng.gen_range(-bound..=bound)
        } else {
            0.0
        };
        prices.push(a * (1.0 + e));
        error_bounds.push(bound);
    }
    PriceForecast {
        window_start,
        prices,
        error_bounds,
    }
}

/// Actual balancing prices plus the forecast error process around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceProcess {
    pub actual: Vec<f64>,
    pub error_rate: f64,
    pub seed: u64,
}

impl PriceProcess {
    pub fn forecast(&self, window_start: usize, window_len: usize) -> PriceForecast {
        forecast_bm_prices(&self.actual, window_start, window_len, self.error_rate, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_exact() {
        let a = [0.3, 0.4, 0.5];
        assert_eq!(forecast_bm_prices(&a, 0, 3, 0.0, 1).prices, a.to_vec());
    }

    #[test]
    fn lead_two_stays_within_band() {
        let a = vec![0.4; 10];
        for seed in 0..200 {
            let f = forecast_bm_prices(&a, 3, 3, 0.015, seed);
            assert!((f.prices[2] / 0.4 - 1.0).abs() <= 0.045 + 1e-15);
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let a: Vec<f64> = (0..24).map(|h| 0.2 + 0.01 * h as f64).collect();
        let x = forecast_bm_prices(&a, 5, 6, 0.015, 42);
        let y = forecast_bm_prices(&a, 5, 6, 0.015, 42);
        assert_eq!(x, y);
        assert_ne!(x.prices, forecast_bm_prices(&a, 5, 6, 0.015, 43).prices);
    }
}
