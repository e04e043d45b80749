//! Percentile bootstrap over batch units.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identify::fit_gamma;
use crate::rng::stream_rng;
use crate::simplex::QualityVector;
use crate::traces::load_from_masses;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    /// The statistic on the full sample.
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub resamples: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resample `units` with replacement and take the percentile interval of
/// `statistic`. Resample `r` draws from its own RNG stream, so the result
/// depends only on `seed`.
pub fn bootstrap_ci<T, F>(units: &[T], statistic: F, opts: BootstrapOptions) -> Result<BootstrapCi>
where
    T: Sync,
    F: Fn(&[&T]) -> Result<f64> + Sync,
{
    if units.len() < 2 {
        return Err(Error::invalid(format!(
            "bootstrap needs at least 2 units, got {}",
            units.len()
        )));
    }
    if opts.resamples == 0 || !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::invalid(
            "bootstrap needs resamples >= 1 and level in (0, 1)",
        ));
    }
    let all: Vec<&T> = units.iter().collect();
    let point = statistic(&all)?;
    let n = units.len();
    let mut values = (0..opts.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(opts.seed, r as u64);
            let pick: Vec<&T> = (0..n).map(|_| &units[rng.random_range(0..n)]).collect();
            statistic(&pick)
        })
        .collect::<Result<Vec<f64>>>()?;
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - opts.level) / 2.0;
    Ok(BootstrapCi {
        point,
        low: quantile(&values, tail),
        high: quantile(&values, 1.0 - tail),
        resamples: opts.resamples,
    })
}

/// CI for `γ_eff` from per-batch dispatch counts, with the quality vector
/// held fixed.
pub fn gamma_ci(
    batch_counts: &[Vec<u64>],
    quality: &QualityVector,
    lambda: f64,
    gamma_max: f64,
    opts: BootstrapOptions,
) -> Result<BootstrapCi> {
    let masses: Vec<Vec<f64>> = batch_counts
        .iter()
        .map(|c| c.iter().map(|&x| x as f64).collect())
        .collect();
    gamma_ci_masses(&masses, quality, lambda, gamma_max, opts)
}

/// As [`gamma_ci`], for per-batch routing masses in either load mode.
pub fn gamma_ci_masses(
    batch_masses: &[Vec<f64>],
    quality: &QualityVector,
    lambda: f64,
    gamma_max: f64,
    opts: BootstrapOptions,
) -> Result<BootstrapCi> {
    let m = quality.len();
    bootstrap_ci(
        batch_masses,
        |pick| {
            let mut masses = vec![0.0; m];
            for unit in pick {
                masses
                    .iter_mut()
                    .zip(unit.iter())
                    .for_each(|(a, &c)| *a += c);
            }
            let load = load_from_masses(&masses)?.load;
            Ok(fit_gamma(&load, quality, lambda, gamma_max)?.gamma_eff)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(xs: &[&f64]) -> Result<f64> {
        Ok(xs.iter().copied().sum::<f64>() / xs.len() as f64)
    }

    #[test]
    fn identical_units_give_degenerate_interval() {
        let ci = bootstrap_ci(&[3.5; 10], mean, BootstrapOptions::default()).unwrap();
        assert_eq!((ci.point, ci.low, ci.high), (3.5, 3.5, 3.5));
    }

    #[test]
    fn same_seed_same_interval() {
        let xs: Vec<f64> = (0..30).map(|i| (i * i % 17) as f64).collect();
        let o = BootstrapOptions {
            resamples: 200,
            ..Default::default()
        };
        let a = bootstrap_ci(&xs, mean, o).unwrap();
        assert_eq!(a, bootstrap_ci(&xs, mean, o).unwrap());
        assert!(a.low <= a.point && a.point <= a.high);
        let b = bootstrap_ci(&xs, mean, BootstrapOptions { seed: 7, ..o }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn needs_two_units() {
        assert!(bootstrap_ci(&[1.0], mean, BootstrapOptions::default()).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
    }
}
