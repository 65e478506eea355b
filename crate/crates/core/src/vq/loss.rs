//! Quantization loss, the straight-through estimator and utilization
//! diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value and stop-gradient-aware gradients of the VQ objective.
#[derive(Debug, Clone, PartialEq)]
pub struct VqLoss {
    pub value: f64,
    /// Gradient of the commitment term `beta * ||z - sg[q]||^2` w.r.t. features.
    pub d_features: Vec<Vec<f64>>,
    /// Gradient of the codebook term `||sg[z] - q||^2` w.r.t. codes.
    pub d_codes: Vec<Vec<f64>>,
}

/// `sum_i ||sg[z_i] - q_i||^2 + beta * ||z_i - sg[q_i]||^2`.
///
/// Both terms share a value, so the loss is `(1 + beta) * sum ||z - q||^2`; the
/// stop-gradients only decide where each term's gradient goes.
pub fn vq_loss(features: &[Vec<f64>], codes: &[Vec<f64>], beta: f64) -> Result<VqLoss> {
    if features.len() != codes.len() {
        return Err(Error::Shape(format!(
            "{} features but {} codes",
            features.len(),
            codes.len()
        )));
    }
    let mut value = 0.0;
    let mut d_features = Vec::with_capacity(features.len());
    let mut d_codes = Vec::with_capacity(codes.len());
    for (z, q) in features.iter().zip(codes) {
        if z.len() != q.len() {
            return Err(Error::Shape("feature and code lengths differ".into()));
        }
        let diff: Vec<f64> = z.iter().zip(q).map(|(a, b)| a - b).collect();
        let sq: f64 = diff.iter().map(|d| d * d).sum();
        value += sq + beta * sq;
        d_features.push(diff.iter().map(|d| 2.0 * beta * d).collect());
        d_codes.push(diff.iter().map(|d| -2.0 * d).collect());
    }
    Ok(VqLoss {
        value,
        d_features,
        d_codes,
    })
}

/// Forward pass of the straight-through estimator: the value is the code.
pub fn straight_through(feature: &[f64], code: &[f64]) -> Vec<f64> {
    assert_eq!(feature.len(), code.len());
    // z + (q - z) evaluates to q up to rounding; return q itself so the
    // forward value is exact.
    code.to_vec()
}

/// Backward pass of the straight-through estimator: the upstream gradient is
/// copied to the feature unchanged and nothing reaches the code.
pub fn straight_through_backward(upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (upstream.to_vec(), vec![0.0; upstream.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub used_fraction: f64,
    pub perplexity: f64,
}

/// Fraction of codes in use and `exp(entropy)` of the assignment histogram.
pub fn codebook_utilization(assignments: &[usize], size: usize) -> Result<Utilization> {
    if assignments.is_empty() {
        return Ok(Utilization {
            used_fraction: 0.0,
            perplexity: 1.0,
        });
    }
    let mut counts = vec![0usize; size];
    for &a in assignments {
        *counts
            .get_mut(a)
            .ok_or_else(|| Error::invalid(format!("assignment {a} outside codebook of size {size}")))? += 1;
    }
    let n = assignments.len() as f64;
    let used = counts.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(Utilization {
        used_fraction: used as f64 / size as f64,
        perplexity: entropy.exp(),
    })
}

/// Tracks when each code was last assigned so dead codes can be recycled.
#[derive(Debug, Clone)]
pub struct UsageTracker {
    last_used: Vec<Vec<usize>>,
}

impl UsageTracker {
    pub fn new(book_sizes: &[usize]) -> Self {
        Self {
            last_used: book_sizes.iter().map(|&n| vec![0; n]).collect(),
        }
    }

    pub fn record(&mut self, book: usize, row: usize, step: usize) {
        self.last_used[book][row] = step;
    }

    /// Rows of `book` unassigned for more than `window` steps as of `step`.
    pub fn dead_rows(&self, book: usize, step: usize, window: usize) -> Vec<usize> {
        self.last_used[book]
            .iter()
            .enumerate()
            .filter(|(_, &last)| step.saturating_sub(last) > window)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_when_feature_equals_code() {
        let l = vq_loss(&[vec![0.6, 0.8]], &[vec![0.6, 0.8]], 0.8).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn hand_computed_value() {
        // ||(1,0) - (0,0)||^2 = 1, so 1 + 0.8 * 1
        let l = vq_loss(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]], 0.8).unwrap();
        assert!((l.value - 1.8).abs() < 1e-15);
        assert_eq!(l.d_features[0], vec![1.6, 0.0]);
        assert_eq!(l.d_codes[0], vec![-2.0, 0.0]);
    }

    #[test]
    fn zero_beta_disables_commitment() {
        let l = vq_loss(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 0.0).unwrap();
        assert!((l.value - 2.0).abs() < 1e-15);
        assert!(l.d_features[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        assert!(vq_loss(&[vec![1.0]], &[], 0.8).is_err());
    }

    #[test]
    fn straight_through_contract() {
        let z = [0.3, -0.1, 0.9, 0.2];
        let q = [0.25, 0.0, 0.95, 0.1];
        assert_eq!(straight_through(&z, &q), q.to_vec());
        let up = [1.5, -2.0, 0.125, 3.0];
        let (dz, dq) = straight_through_backward(&up);
        assert_eq!(dz, up.to_vec());
        assert!(dq.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn utilization_cases() {
        let u = codebook_utilization(&[0, 0, 0], 4).unwrap();
        assert_eq!(u.used_fraction, 0.25);
        assert!((u.perplexity - 1.0).abs() < 1e-15);
        // entropy of uniform over 4 is ln 4
        let u = codebook_utilization(&[0, 1, 2, 3, 3, 2, 1, 0], 4).unwrap();
        assert!((u.perplexity - 4.0).abs() < 1e-12);
        assert_eq!(u.used_fraction, 1.0);
        let u = codebook_utilization(&[], 4).unwrap();
        assert_eq!((u.used_fraction, u.perplexity), (0.0, 1.0));
        assert!(codebook_utilization(&[4], 4).is_err());
    }

    #[test]
    fn dead_codes_after_window() {
        let mut t = UsageTracker::new(&[3]);
        t.record(0, 1, 10);
        assert_eq!(t.dead_rows(0, 10, 10), Vec::<usize>::new());
        assert_eq!(t.dead_rows(0, 11, 10), vec![0, 2]);
        assert_eq!(t.dead_rows(0, 21, 10), vec![0, 1, 2]);
    }
}
