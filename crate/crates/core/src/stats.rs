//! Nearest-rank order statistics.

use serde::{Deserialize, Serialize};

/// Index into a sorted slice of length `n` for the quantile `num / den`,
/// `max(ceil(p * n), 1) - 1`, in integer arithmetic.
pub fn nearest_rank_index(num: usize, den: usize, n: usize) -> usize {
    debug_assert!(n > 0 && den > 0 && num <= den);
    let rank = (num * n).div_ceil(den);
    rank.max(1) - 1
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// The 11 values at p = 0, 0.1, ..., 1.0. `None` for an empty input.
pub fn deciles(values: &[f64]) -> Option<[f64; 11]> {
    let v = sorted(values);
    if v.is_empty() {
        return None;
    }
    Some(std::array::from_fn(|i| v[nearest_rank_index(i, 10, v.len())]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    let v = sorted(values);
    let n = v.len();
    if n == 0 {
        return None;
    }
    let q = |k| v[nearest_rank_index(k, 4, n)];
    Some(BoxStats {
        n,
        min: v[0],
        q1: q(1),
        median: q(2),
        q3: q(3),
        max: v[n - 1],
    })
}

/// Nearest-rank median of a non-empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    let v = sorted(values);
    (!v.is_empty()).then(|| v[nearest_rank_index(1, 2, v.len())])
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Standard deviation with the n - 1 denominator.
pub fn sample_sd(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (n - 1) as f64).sqrt())
}
