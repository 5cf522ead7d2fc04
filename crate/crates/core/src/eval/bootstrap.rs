//! Percentile bootstrap over query indices with a fixed candidate gallery.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_index_seed, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// Quantile `q` of sorted values with linear interpolation between order
/// statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Indices drawn for replicate `b`.
pub fn resample(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut r = rng_from(derive_index_seed(seed, b as u64));
    (0..n).map(|_| r.random_range(0..n)).collect()
}

/// `(lo, hi)` of `metric` over `replicates` resamplings of the `n` query
/// indices. Each replicate draws from its own seed, so the result does not
/// depend on evaluation order.
pub fn bootstrap_ci(n: usize, metric: impl Fn(&[usize]) -> f64, cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    if n == 0 || cfg.replicates == 0 {
        return Err(Error::invalid("bootstrap needs at least one query and one replicate"));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::invalid(format!("confidence level {} outside (0, 1)", cfg.level)));
    }
    let mut values: Vec<f64> = (0..cfg.replicates)
        .map(|b| metric(&resample(n, cfg.seed, b)))
        .collect();
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("bootstrap metric value {v}")));
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok((percentile(&values, tail), percentile(&values, 1.0 - tail)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert_eq!(percentile(&v, 0.125), 0.5);
        assert_eq!(percentile(&[7.0], 0.975), 7.0);
    }

    #[test]
    fn constant_metric_has_zero_width() {
        let (lo, hi) = bootstrap_ci(10, |_| 0.25, &BootstrapConfig::default()).unwrap();
        assert_eq!((lo, hi), (0.25, 0.25));
    }

    #[test]
    fn replicates_are_order_independent() {
        assert_eq!(resample(20, 3, 7), resample(20, 3, 7));
        assert_ne!(resample(20, 3, 7), resample(20, 3, 8));
    }
}
