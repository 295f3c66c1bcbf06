//! Exact Otsu thresholding over small sets of scores.
//!
//! Candidate cuts are the distinct sample values. A cut `t` splits the set
//! into `{v <= t}` and `{v > t}`; the returned `t` maximizes the
//! between-class variance `w0 * w1 * (mu0 - mu1)^2`.

use thiserror::Error;

/// Two between-class variances closer than this (relative to the total
/// variance of the set) are treated as a tie, resolved toward the smaller cut.
pub const VARIANCE_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThresholdError {
    #[error("score set is empty")]
    Empty,
    #[error("score {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
}

/// Non-empty list of scores in `[0, 1]`, in candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    values: Vec<f64>,
}

impl ScoreSet {
    pub fn new(values: Vec<f64>) -> Result<Self, ThresholdError> {
        if values.is_empty() {
            return Err(ThresholdError::Empty);
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ThresholdError::OutOfRange { index, value });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Index partition produced by [`split`]. Both lists are ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub above: Vec<usize>,
    pub below: Vec<usize>,
}

pub fn otsu_threshold(set: &ScoreSet) -> f64 {
    otsu_values(&set.values).expect("ScoreSet is never empty")
}

/// Otsu over a raw slice. `None` for an empty slice.
pub(crate) fn otsu_values(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));

    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().sum();
    let mean = total / n;
    let scale = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;

    let mut best_t = sorted[0];
    let mut best_var = f64::NEG_INFINITY;
    let mut count = 0usize;
    let mut prefix = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i];
        while i < sorted.len() && sorted[i] == t {
            prefix += sorted[i];
            count += 1;
            i += 1;
        }
        let var = if count == sorted.len() {
            0.0
        } else {
            let w0 = count as f64 / n;
            let w1 = 1.0 - w0;
            let mu0 = prefix / count as f64;
            let mu1 = (total - prefix) / (sorted.len() - count) as f64;
            w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
        };
        // Cuts are visited in ascending order, so only a strict improvement
        // beyond the tie tolerance moves the threshold upward.
        if var > best_var + VARIANCE_TIE_TOLERANCE * scale {
            best_var = var;
            best_t = t;
        }
    }
    Some(best_t)
}

/// Partition indices into `v > t` (above) and `v <= t` (below).
pub fn split(set: &ScoreSet, t: f64) -> Split {
    split_values(&set.values, t)
}

pub(crate) fn split_values(values: &[f64], t: f64) -> Split {
    let mut out = Split::default();
    for (j, &v) in values.iter().enumerate() {
        if v > t {
            out.above.push(j);
        } else {
            out.below.push(j);
        }
    }
    out
}
