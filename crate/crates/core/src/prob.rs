//! Probability vectors over the label set and the numerically stable
//! primitives built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied before taking logs of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// A nonnegative vector over the classes that sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that `values` lies on the simplex.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("empty probability vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!("probability vector has invalid entries: {values:?}")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Data(format!("probability vector sums to {total}")));
        }
        Ok(Self(values))
    }

    /// Rescales nonnegative weights so they sum to one.
    pub fn normalize(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!("cannot normalize {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || weights.is_empty() {
            return Err(Error::Degenerate(format!("all-zero weights {weights:?}")));
        }
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction; never overflows for finite input.
pub fn softmax(logits: &[f64]) -> ProbVector {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    ProbVector(out)
}

pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// `ln(max(p, LOG_FLOOR))`
pub fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(ProbVector::normalize(vec![0.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(ProbVector::new(vec![0.3, 0.3]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_on_simplex_and_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits);
            let total: f64 = p.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.as_slice().iter().all(|v| *v >= 0.0));
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
