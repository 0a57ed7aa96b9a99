//! Log-space reductions, the log-average-exp bound family and grid quadrature.
//!
//! `-inf` entries are legal everywhere (they encode zero likelihood); NaN is
//! rejected. Quadrature is the rectangle rule with weight equal to the grid
//! step.

use crate::distributions::GridDensity;
use crate::error::{usage, Error, Result};
use serde::{Deserialize, Serialize};

/// A uniform grid on `[lo, hi]` with `count` points, both endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    lo: f64,
    hi: f64,
    count: usize,
}

impl Grid1D {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return usage(format!("grid bounds must satisfy lo < hi, got [{lo}, {hi}]"));
        }
        if count < 2 {
            return usage(format!("grid needs at least 2 points, got {count}"));
        }
        Ok(Self { lo, hi, count })
    }

    /// Grid whose step is at most `max_step`.
    pub fn with_max_step(lo: f64, hi: f64, max_step: f64) -> Result<Self> {
        if !(max_step > 0.0) {
            return usage("max_step must be positive");
        }
        let count = ((hi - lo) / max_step).ceil() as usize + 1;
        Self::new(lo, hi, count.max(2))
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.point(i)).collect()
    }

    /// Rectangle-rule integral of `values` sampled at the grid points.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.count);
        values.iter().sum::<f64>() * self.step()
    }

    /// Rectangle-rule integral of `f` over the grid.
    pub fn integrate_fn(&self, f: impl Fn(f64) -> f64) -> f64 {
        (0..self.count).map(|i| f(self.point(i))).sum::<f64>() * self.step()
    }
}

fn check_finite_or_neg_inf(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return usage("reduction over an empty vector");
    }
    if let Some(i) = v.iter().position(|x| x.is_nan()) {
        return usage(format!("NaN at index {i}"));
    }
    Ok(())
}

// Unchecked kernel shared by the checked entry points and hot loops.
pub(crate) fn lse_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn lme_unchecked(v: &[f64]) -> f64 {
    lse_unchecked(v) - (v.len() as f64).ln()
}

/// `log Σ exp(v_i)` by max-shifting.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    check_finite_or_neg_inf(v)?;
    Ok(lse_unchecked(v))
}

/// `log((1/n) Σ exp(v_i))`.
///
/// Always lies in `[max(mean(v), max(v) - log n), max(v)]`.
pub fn log_mean_exp(v: &[f64]) -> Result<f64> {
    check_finite_or_neg_inf(v)?;
    Ok(lme_unchecked(v))
}

/// Tempered log-average-exp `(1/φ) log((1/n) Σ exp(φ v_i))`, with the
/// arithmetic mean as the `φ = 0` limit.
///
/// For every `φ ∈ [0, 1]` the negated value upper-bounds `-log_mean_exp(v)`.
pub fn log_avg_exp_tempered(v: &[f64], phi: f64) -> Result<f64> {
    check_finite_or_neg_inf(v)?;
    if !(0.0..=1.0).contains(&phi) {
        return usage(format!("phi must lie in [0, 1], got {phi}"));
    }
    if phi == 0.0 {
        return Ok(v.iter().sum::<f64>() / v.len() as f64);
    }
    if phi == 1.0 {
        return Ok(lme_unchecked(v));
    }
    let scaled: Vec<f64> = v.iter().map(|x| phi * x).collect();
    Ok(lme_unchecked(&scaled) / phi)
}

/// Normalizes unnormalized log-density values on `grid` so that the
/// rectangle-rule mass is one. Normalization happens in log space.
pub fn normalize_log_density(grid: Grid1D, logvals: &[f64]) -> Result<GridDensity> {
    if logvals.len() != grid.count() {
        return Err(Error::DimensionMismatch {
            expected: grid.count(),
            got: logvals.len(),
        });
    }
    check_finite_or_neg_inf(logvals)?;
    let lse = lse_unchecked(logvals);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateDensity);
    }
    let log_norm = lse + grid.step().ln();
    let probs = logvals.iter().map(|l| (l - log_norm).exp()).collect();
    GridDensity::new(grid, probs)
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Median of a slice (NaN-free input assumed).
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("median of NaN"));
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}
