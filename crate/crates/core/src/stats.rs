//! Accuracy and percentile-bootstrap confidence intervals.
//!
//! Intervals are taken on per-item paired deltas (method minus baseline) by
//! default. Quantiles use the nearest-rank rule on the sorted resample means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

pub const DEFAULT_ITERATIONS: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const MIN_ITERATIONS: usize = 1_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("statistic over an empty set")]
    EmptySet,
    #[error("confidence level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("bootstrap needs at least {MIN_ITERATIONS} iterations, got {0}")]
    TooFewIterations(usize),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Fraction of `true` indicators.
pub fn accuracy<I: IntoIterator<Item = bool>>(indicators: I) -> Result<f64, StatsError> {
    let (hits, n) = indicators
        .into_iter()
        .fold((0usize, 0usize), |(h, n), c| (h + usize::from(c), n + 1));
    if n == 0 {
        return Err(StatsError::EmptySet);
    }
    Ok(hits as f64 / n as f64)
}

pub fn mean<T: Real>(values: &[T]) -> Result<T, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySet);
    }
    let sum = values.iter().copied().fold(T::zero(), |a, b| a + b);
    Ok(sum / T::from_count(values.len()))
}

/// Per-item `method - baseline` for paired correctness indicators.
pub fn paired_deltas<T: Real>(method: &[bool], baseline: &[bool]) -> Result<Vec<T>, StatsError> {
    if method.len() != baseline.len() {
        return Err(StatsError::LengthMismatch(method.len(), baseline.len()));
    }
    Ok(method
        .iter()
        .zip(baseline)
        .map(|(&m, &b)| T::from_count(usize::from(m)) - T::from_count(usize::from(b)))
        .collect())
}

/// Nearest-rank quantile of an ascending slice: element at rank `ceil(q * n)`.
pub fn nearest_rank<T: Copy>(sorted: &[T], q: f64) -> T {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn resample_mean<T: Real, R: Rng>(values: &[T], rng: &mut R) -> T {
    let n = values.len();
    let sum = (0..n).fold(T::zero(), |acc, _| acc + values[rng.random_range(0..n)]);
    sum / T::from_count(n)
}

/// Means of `iterations` with-replacement resamples, in draw order.
pub fn bootstrap_means<T: Real>(values: &[T], iterations: usize, seed: u64) -> Result<Vec<T>, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..iterations).map(|_| resample_mean(values, &mut rng)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi<T> {
    pub estimate: T,
    pub lo: T,
    pub hi: T,
    pub level: f64,
    pub iterations: usize,
    /// The interval excludes zero.
    pub significant: bool,
}

fn check_args(iterations: usize, level: f64) -> Result<(), StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::BadLevel(level));
    }
    if iterations < MIN_ITERATIONS {
        return Err(StatsError::TooFewIterations(iterations));
    }
    Ok(())
}

fn interval<T: Real>(mut means: Vec<T>, estimate: T, level: f64) -> BootstrapCi<T> {
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite resample means"));
    let tail = (1.0 - level) / 2.0;
    let lo = nearest_rank(&means, tail);
    let hi = nearest_rank(&means, 1.0 - tail);
    BootstrapCi {
        estimate,
        lo,
        hi,
        level,
        iterations: means.len(),
        significant: lo > T::zero() || hi < T::zero(),
    }
}

/// Percentile bootstrap CI of the mean of `deltas`.
pub fn bootstrap_ci<T: Real>(
    deltas: &[T],
    iterations: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi<T>, StatsError> {
    check_args(iterations, level)?;
    let estimate = mean(deltas)?;
    let means = bootstrap_means(deltas, iterations, seed)?;
    Ok(interval(means, estimate, level))
}

/// Unpaired variant: method and baseline samples are resampled independently
/// and the CI is on the difference of their means.
pub fn bootstrap_ci_unpaired<T: Real>(
    method: &[T],
    baseline: &[T],
    iterations: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi<T>, StatsError> {
    check_args(iterations, level)?;
    let estimate = mean(method)? - mean(baseline)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diffs = (0..iterations)
        .map(|_| resample_mean(method, &mut rng) - resample_mean(baseline, &mut rng))
        .collect();
    Ok(interval(diffs, estimate, level))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy([true; 5]).unwrap(), 1.0);
        assert_eq!(accuracy([true, true, false, true]).unwrap(), 0.75);
        assert_eq!(accuracy(Vec::<bool>::new()), Err(StatsError::EmptySet));
    }

    #[test]
    fn nearest_rank_convention() {
        let v = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        assert_eq!(nearest_rank(&v, 0.025), 1);
        assert_eq!(nearest_rank(&v, 0.1), 1);
        assert_eq!(nearest_rank(&v, 0.11), 2);
        assert_eq!(nearest_rank(&v, 0.975), 10);
        assert_eq!(nearest_rank(&v, 0.0), 1);
        assert_eq!(nearest_rank(&v, 1.0), 10);
    }

    #[test]
    fn degenerate_and_identical() {
        let ci = bootstrap_ci(&[1.0f64; 50], 1000, 0.95, 1).unwrap();
        assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
        assert!(ci.significant);

        let same = [true, false, true, true];
        let d = paired_deltas::<f64>(&same, &same).unwrap();
        let ci = bootstrap_ci(&d, 1000, 0.95, 1).unwrap();
        assert_eq!((ci.lo, ci.hi, ci.significant), (0.0, 0.0, false));
    }

    #[test]
    fn argument_errors() {
        assert_eq!(bootstrap_ci::<f64>(&[], 1000, 0.95, 0), Err(StatsError::EmptySet));
        assert_eq!(bootstrap_ci(&[1.0f64], 1000, 1.0, 0), Err(StatsError::BadLevel(1.0)));
        assert_eq!(bootstrap_ci(&[1.0f64], 10, 0.95, 0), Err(StatsError::TooFewIterations(10)));
        assert_eq!(paired_deltas::<f64>(&[true], &[]), Err(StatsError::LengthMismatch(1, 0)));
    }

    #[test]
    fn wider_level_nests() {
        let deltas: Vec<f64> = (0..200).map(|i| ((i * 37) % 11) as f64 / 10.0 - 0.4).collect();
        let narrow = bootstrap_ci(&deltas, 2000, 0.8, 9).unwrap();
        let wide = bootstrap_ci(&deltas, 2000, 0.99, 9).unwrap();
        assert!(wide.lo <= narrow.lo && narrow.hi <= wide.hi);
        assert!(narrow.lo <= narrow.hi);
    }

    #[test]
    fn unpaired_runs() {
        let m: Vec<f64> = (0..100).map(|i| f64::from(i % 4 != 0)).collect();
        let b: Vec<f64> = (0..100).map(|i| f64::from(i % 2 == 0)).collect();
        let ci = bootstrap_ci_unpaired(&m, &b, 2000, 0.95, 3).unwrap();
        assert!((ci.estimate - 0.25).abs() < 1e-12);
        assert!(ci.lo <= ci.estimate && ci.estimate <= ci.hi);
    }

    #[test]
    fn f32_instantiation() {
        let ci = bootstrap_ci(&[0.5f32, 1.0, 0.0, 0.5], 1000, 0.95, 4).unwrap();
        assert!(ci.lo <= ci.hi);
    }
}
