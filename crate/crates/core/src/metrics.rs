//! Sample-comparison metrics: histogram-based Jensen–Shannon divergence and
//! Frobenius covariance error.

use nalgebra::DVector;

use crate::error::{FhError, Result};
use crate::matrix::{CovarianceBackend, DenseSymMatrix};

/// One histogram axis: [lo, hi) split into `bins` cells.
#[derive(Debug, Clone, Copy)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

/// Regular grid over a box, with additive smoothing mass per bin.
#[derive(Debug, Clone)]
pub struct HistogramGrid {
    pub axes: Vec<AxisSpec>,
    pub epsilon: f64,
}

impl HistogramGrid {
    pub fn new(axes: Vec<AxisSpec>) -> Result<Self> {
        if axes.is_empty() {
            return Err(FhError::contract("histogram grid needs at least one axis"));
        }
        for a in &axes {
            if !(a.lo < a.hi) || a.bins == 0 {
                return Err(FhError::contract("histogram axis needs lo < hi and bins > 0"));
            }
        }
        Ok(Self {
            axes,
            epsilon: 1e-9,
        })
    }

    /// Square 2-D grid over [lo, hi]^2.
    pub fn square_2d(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        Self::new(vec![AxisSpec { lo, hi, bins }, AxisSpec { lo, hi, bins }])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_bins(&self) -> usize {
        self.axes.iter().map(|a| a.bins).product()
    }

    fn bin_index(&self, x: &DVector<f64>) -> Option<usize> {
        let mut idx = 0;
        for (a, &v) in self.axes.iter().zip(x.iter()) {
            if v < a.lo || v >= a.hi {
                return None;
            }
            let b = (((v - a.lo) / (a.hi - a.lo)) * a.bins as f64) as usize;
            idx = idx * a.bins + b.min(a.bins - 1);
        }
        Some(idx)
    }

    /// Smoothed, normalized bin probabilities; returns the fraction of
    /// samples that landed inside the box alongside.
    fn probabilities(&self, samples: &[DVector<f64>]) -> Result<(Vec<f64>, f64)> {
        if samples.is_empty() {
            return Err(FhError::contract("histogram needs a nonempty sample set"));
        }
        if samples[0].len() != self.dim() {
            return Err(FhError::contract("sample dimension does not match grid"));
        }
        let mut counts = vec![0.0f64; self.n_bins()];
        let mut inside = 0usize;
        for s in samples {
            if let Some(i) = self.bin_index(s) {
                counts[i] += 1.0;
                inside += 1;
            }
        }
        let total: f64 = counts.iter().sum::<f64>() + self.epsilon * counts.len() as f64;
        let probs = counts
            .iter()
            .map(|c| (c + self.epsilon) / total)
            .collect();
        Ok((probs, inside as f64 / samples.len() as f64))
    }
}

/// Jensen–Shannon divergence in bits (base-2 logs), in [0, 1].
#[derive(Debug, Clone, Copy)]
pub struct JsdResult {
    pub value: f64,
    pub coverage_a: f64,
    pub coverage_b: f64,
    /// Set when either sample set has below 99% grid coverage.
    pub coverage_warning: bool,
}

pub fn jensen_shannon(
    samples_a: &[DVector<f64>],
    samples_b: &[DVector<f64>],
    grid: &HistogramGrid,
) -> Result<JsdResult> {
    let (p, cov_a) = grid.probabilities(samples_a)?;
    let (q, cov_b) = grid.probabilities(samples_b)?;
    let mut value = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        let m = 0.5 * (pi + qi);
        // one addition per bin keeps the divergence exactly symmetric in
        // its arguments (IEEE addition commutes)
        let term_p = if *pi > 0.0 { 0.5 * pi * (pi / m).log2() } else { 0.0 };
        let term_q = if *qi > 0.0 { 0.5 * qi * (qi / m).log2() } else { 0.0 };
        value += term_p + term_q;
    }
    Ok(JsdResult {
        value: value.clamp(0.0, 1.0),
        coverage_a: cov_a,
        coverage_b: cov_b,
        coverage_warning: cov_a < 0.99 || cov_b < 0.99,
    })
}

/// `|dense(estimate) - truth|_F`.
pub fn frobenius_error(estimate: &CovarianceBackend, truth: &DenseSymMatrix) -> Result<f64> {
    let est = estimate.to_dense()?;
    if est.dim() != truth.dim() {
        return Err(FhError::contract("covariance dimensions do not match"));
    }
    Ok((est.as_matrix() - truth.as_matrix()).norm())
}
