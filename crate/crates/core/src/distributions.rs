//! One-dimensional densities, parameter distributions and KL divergences.
//!
//! Everything uses the scale (standard deviation) parameterization. The
//! parameter distributions of the toy model ([`GridDensity`],
//! [`AtomicMixture`], [`Normal1D`]) implement [`ParamDistribution`], which
//! exposes the two integrals the risks need against a unit-family
//! `Normal(x; θ, model_scale)` likelihood.

use crate::error::{usage, Error, Result};
use crate::numerics::{lse_unchecked, Grid1D};
use crate::Rng;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{PI, SQRT_2};

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Mass tolerance accepted for grid densities.
const GRID_MASS_TOL: f64 = 1e-9;

/// Log density of `Normal(loc, scale)` at `x`, without validation.
#[inline]
pub fn normal_log_pdf(x: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    -0.5 * z * z - scale.ln() - HALF_LN_2PI
}

#[inline]
pub fn normal_pdf(x: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    (-0.5 * z * z).exp() / (scale * (2.0 * PI).sqrt())
}

#[inline]
fn normal_cdf(x: f64, loc: f64, scale: f64) -> f64 {
    0.5 * erfc(-(x - loc) / (scale * SQRT_2))
}

/// Densities over the real line.
pub trait LogDensity1D {
    fn log_prob(&self, x: f64) -> f64;

    fn pdf(&self, x: f64) -> f64 {
        self.log_prob(x).exp()
    }
}

/// Draws i.i.d. samples from a 1-D distribution.
pub trait Sample1D {
    fn sample(&self, rng: &mut Rng, k: usize) -> Vec<f64>;
}

/// A distribution over the location parameter of the unit-family model
/// `p(x|θ) = Normal(x; θ, model_scale)`.
pub trait ParamDistribution {
    /// `∫ q(θ) Normal(x; θ, model_scale) dθ`.
    fn predictive_density(&self, model_scale: f64, x: f64) -> f64;

    /// `E_q[log Normal(x; θ, model_scale)]`.
    fn expected_log_lik(&self, model_scale: f64, x: f64) -> f64;

    /// Log of [`ParamDistribution::predictive_density`]; overridden where a
    /// log-space evaluation is more accurate in the tails.
    fn log_predictive_density(&self, model_scale: f64, x: f64) -> f64 {
        self.predictive_density(model_scale, x).ln()
    }
}

/// Posterior predictive density at `x` for the unit-family Normal model.
pub fn predictive_density<Q: ParamDistribution + ?Sized>(q: &Q, model_scale: f64, x: f64) -> f64 {
    q.predictive_density(model_scale, x)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normal1D {
    loc: f64,
    scale: f64,
}

impl Normal1D {
    pub fn new(loc: f64, scale: f64) -> Result<Self> {
        if !loc.is_finite() {
            return usage(format!("normal location must be finite, got {loc}"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return usage(format!("normal scale must be positive, got {scale}"));
        }
        Ok(Self { loc, scale })
    }

    pub fn standard() -> Self {
        Self {
            loc: 0.0,
            scale: 1.0,
        }
    }

    pub fn loc(&self) -> f64 {
        self.loc
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn variance(&self) -> f64 {
        self.scale * self.scale
    }

    pub fn cdf(&self, x: f64) -> f64 {
        normal_cdf(x, self.loc, self.scale)
    }
}

impl LogDensity1D for Normal1D {
    fn log_prob(&self, x: f64) -> f64 {
        normal_log_pdf(x, self.loc, self.scale)
    }
}

impl Sample1D for Normal1D {
    fn sample(&self, rng: &mut Rng, k: usize) -> Vec<f64> {
        (0..k)
            .map(|_| self.loc + self.scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

impl ParamDistribution for Normal1D {
    fn predictive_density(&self, model_scale: f64, x: f64) -> f64 {
        normal_pdf(x, self.loc, self.scale.hypot(model_scale))
    }

    fn log_predictive_density(&self, model_scale: f64, x: f64) -> f64 {
        normal_log_pdf(x, self.loc, self.scale.hypot(model_scale))
    }

    fn expected_log_lik(&self, model_scale: f64, x: f64) -> f64 {
        let s2 = model_scale * model_scale;
        -HALF_LN_2PI - model_scale.ln() - ((x - self.loc).powi(2) + self.variance()) / (2.0 * s2)
    }
}

/// Closed-form `KL[q ‖ r]` between two normals, in nats.
pub fn kl_normal_normal(q: &Normal1D, r: &Normal1D) -> f64 {
    (r.scale / q.scale).ln() + (q.variance() + (q.loc - r.loc).powi(2)) / (2.0 * r.variance())
        - 0.5
}

// ---------------------------------------------------------------------------

/// Finite mixture of normals. Houses the true data distribution ν of the toy
/// problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureNormal1D {
    weights: Vec<f64>,
    locs: Vec<f64>,
    scales: Vec<f64>,
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return usage("mixture needs at least one component");
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return usage("mixture weights must be positive");
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return usage(format!("mixture weights must sum to 1, got {total}"));
    }
    Ok(())
}

impl MixtureNormal1D {
    pub fn new(weights: Vec<f64>, locs: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        check_weights(&weights)?;
        if locs.len() != weights.len() || scales.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: weights.len(),
                got: if locs.len() != weights.len() {
                    locs.len()
                } else {
                    scales.len()
                },
            });
        }
        if scales.iter().any(|s| !(*s > 0.0)) {
            return usage("mixture scales must be positive");
        }
        Ok(Self {
            weights,
            locs,
            scales,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locs(&self) -> &[f64] {
        &self.locs
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.locs).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.weights
            .iter()
            .zip(self.locs.iter().zip(&self.scales))
            .map(|(w, (m, s))| w * (s * s + (m - mean).powi(2)))
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.locs.iter().zip(&self.scales))
            .map(|(w, (m, s))| w * normal_cdf(x, *m, *s))
            .sum()
    }

    /// Probability mass inside `[lo, hi]`.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        self.cdf(hi) - self.cdf(lo)
    }
}

impl LogDensity1D for MixtureNormal1D {
    fn log_prob(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.locs.iter().zip(&self.scales))
            .map(|(w, (m, s))| w.ln() + normal_log_pdf(x, *m, *s))
            .collect();
        lse_unchecked(&terms)
    }
}

fn pick_component(rng: &mut Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return c;
        }
    }
    weights.len() - 1
}

impl Sample1D for MixtureNormal1D {
    fn sample(&self, rng: &mut Rng, k: usize) -> Vec<f64> {
        (0..k)
            .map(|_| {
                let c = pick_component(rng, &self.weights);
                self.locs[c] + self.scales[c] * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------

/// A density tabulated on a uniform grid, normalized under the rectangle rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    grid: Grid1D,
    probs: Vec<f64>,
}

impl GridDensity {
    pub fn new(grid: Grid1D, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != grid.count() {
            return Err(Error::DimensionMismatch {
                expected: grid.count(),
                got: probs.len(),
            });
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return usage("grid density values must be finite and non-negative");
        }
        let mass = grid.integrate(&probs);
        if (mass - 1.0).abs() > GRID_MASS_TOL {
            return usage(format!("grid density mass must be 1, got {mass}"));
        }
        Ok(Self { grid, probs })
    }

    /// Tabulates `log_density` on the grid and normalizes.
    pub fn discretize(grid: Grid1D, log_density: impl Fn(f64) -> f64) -> Result<Self> {
        let logs: Vec<f64> = grid.points().into_iter().map(log_density).collect();
        crate::numerics::normalize_log_density(grid, &logs)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.probs)
    }

    pub fn mean(&self) -> f64 {
        let pts = self.grid.points();
        pts.iter().zip(&self.probs).map(|(t, p)| t * p).sum::<f64>() * self.grid.step()
    }

    // Per-point quadrature weights q_k * step.
    fn cell_masses(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let step = self.grid.step();
        self.probs
            .iter()
            .enumerate()
            .map(move |(k, p)| (self.grid.point(k), p * step))
    }
}

impl LogDensity1D for GridDensity {
    /// Linear interpolation between grid values; `-inf` off the grid.
    fn log_prob(&self, x: f64) -> f64 {
        let g = &self.grid;
        if !(x >= g.lo() && x <= g.hi()) {
            return f64::NEG_INFINITY;
        }
        let pos = (x - g.lo()) / g.step();
        let i = (pos.floor() as usize).min(g.count() - 2);
        let frac = (pos - i as f64).clamp(0.0, 1.0);
        let p = self.probs[i] * (1.0 - frac) + self.probs[i + 1] * frac;
        p.ln()
    }
}

impl Sample1D for GridDensity {
    /// Discrete inverse-CDF over the grid points.
    fn sample(&self, rng: &mut Rng, k: usize) -> Vec<f64> {
        let step = self.grid.step();
        let mut cdf = Vec::with_capacity(self.probs.len());
        let mut acc = 0.0;
        for p in &self.probs {
            acc += p * step;
            cdf.push(acc);
        }
        let total = acc;
        (0..k)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * total;
                let idx = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
                self.grid.point(idx)
            })
            .collect()
    }
}

impl ParamDistribution for GridDensity {
    fn predictive_density(&self, model_scale: f64, x: f64) -> f64 {
        self.cell_masses()
            .map(|(t, w)| w * normal_pdf(x, t, model_scale))
            .sum()
    }

    fn log_predictive_density(&self, model_scale: f64, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .cell_masses()
            .filter(|(_, w)| *w > 0.0)
            .map(|(t, w)| w.ln() + normal_log_pdf(x, t, model_scale))
            .collect();
        lse_unchecked(&terms)
    }

    fn expected_log_lik(&self, model_scale: f64, x: f64) -> f64 {
        self.cell_masses()
            .filter(|(_, w)| *w > 0.0)
            .map(|(t, w)| w * normal_log_pdf(x, t, model_scale))
            .sum()
    }
}

/// Rectangle-rule `∫ q log(q/r)` for densities on the same grid.
pub fn kl_grid(q: &GridDensity, r: &GridDensity) -> Result<f64> {
    if q.grid != r.grid {
        return usage("kl_grid needs both densities on the same grid");
    }
    let mut acc = 0.0;
    for (index, (pq, pr)) in q.probs.iter().zip(&r.probs).enumerate() {
        if *pq == 0.0 {
            continue;
        }
        if *pr == 0.0 {
            return Err(Error::AbsoluteContinuity { index, q: *pq });
        }
        acc += pq * (pq.ln() - pr.ln());
    }
    Ok(acc * q.grid.step())
}

// ---------------------------------------------------------------------------

/// Weighted sum of point masses (`component_scale == 0`) or of equal-scale
/// normal components over the parameter line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMixture {
    weights: Vec<f64>,
    locs: Vec<f64>,
    component_scale: f64,
}

impl AtomicMixture {
    pub fn new(weights: Vec<f64>, locs: Vec<f64>, component_scale: f64) -> Result<Self> {
        check_weights(&weights)?;
        if locs.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: weights.len(),
                got: locs.len(),
            });
        }
        if !(component_scale >= 0.0 && component_scale.is_finite()) {
            return usage("component scale must be finite and non-negative");
        }
        Ok(Self {
            weights,
            locs,
            component_scale,
        })
    }

    /// Uniform weights over `locs`.
    pub fn uniform(locs: Vec<f64>, component_scale: f64) -> Result<Self> {
        let k = locs.len();
        if k == 0 {
            return usage("atomic mixture needs at least one location");
        }
        // exact 1/k weights can miss the 1e-12 sum tolerance only for huge k
        Self::new(vec![1.0 / k as f64; k], locs, component_scale)
    }

    pub fn point_mass(loc: f64) -> Self {
        Self {
            weights: vec![1.0],
            locs: vec![loc],
            component_scale: 0.0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locs(&self) -> &[f64] {
        &self.locs
    }

    pub fn component_scale(&self) -> f64 {
        self.component_scale
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.locs).map(|(w, l)| w * l).sum()
    }

    /// The same components convolved with `Normal(0, model_scale)`: the
    /// predictive distribution as an explicit mixture.
    pub fn convolved(&self, model_scale: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            locs: self.locs.clone(),
            component_scale: self.component_scale.hypot(model_scale),
        }
    }
}

impl LogDensity1D for AtomicMixture {
    /// For point masses this is `+inf` on an atom and `-inf` elsewhere.
    fn log_prob(&self, x: f64) -> f64 {
        if self.component_scale == 0.0 {
            return if self.locs.contains(&x) {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            };
        }
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.locs)
            .map(|(w, l)| w.ln() + normal_log_pdf(x, *l, self.component_scale))
            .collect();
        lse_unchecked(&terms)
    }
}

impl Sample1D for AtomicMixture {
    fn sample(&self, rng: &mut Rng, k: usize) -> Vec<f64> {
        (0..k)
            .map(|_| {
                let c = pick_component(rng, &self.weights);
                if self.component_scale == 0.0 {
                    self.locs[c]
                } else {
                    self.locs[c] + self.component_scale * rng.sample::<f64, _>(StandardNormal)
                }
            })
            .collect()
    }
}

impl ParamDistribution for AtomicMixture {
    fn predictive_density(&self, model_scale: f64, x: f64) -> f64 {
        let s = self.component_scale.hypot(model_scale);
        self.weights
            .iter()
            .zip(&self.locs)
            .map(|(w, l)| w * normal_pdf(x, *l, s))
            .sum()
    }

    fn log_predictive_density(&self, model_scale: f64, x: f64) -> f64 {
        let s = self.component_scale.hypot(model_scale);
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.locs)
            .map(|(w, l)| w.ln() + normal_log_pdf(x, *l, s))
            .collect();
        lse_unchecked(&terms)
    }

    fn expected_log_lik(&self, model_scale: f64, x: f64) -> f64 {
        let c2 = self.component_scale * self.component_scale;
        let s2 = model_scale * model_scale;
        self.weights
            .iter()
            .zip(&self.locs)
            .map(|(w, l)| {
                w * (-HALF_LN_2PI - model_scale.ln() - ((x - l).powi(2) + c2) / (2.0 * s2))
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------

/// Diagonal Gaussian over a flat parameter vector. Scales are `exp(raw_scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldGaussian {
    locs: Vec<f64>,
    raw_scales: Vec<f64>,
}

impl MeanFieldGaussian {
    pub fn new(locs: Vec<f64>, raw_scales: Vec<f64>) -> Result<Self> {
        if locs.len() != raw_scales.len() {
            return Err(Error::DimensionMismatch {
                expected: locs.len(),
                got: raw_scales.len(),
            });
        }
        if locs.iter().chain(&raw_scales).any(|v| !v.is_finite()) {
            return usage("mean-field parameters must be finite");
        }
        if raw_scales.iter().any(|r| r.exp() == 0.0 || !r.exp().is_finite()) {
            return usage("mean-field scales must be strictly positive and finite");
        }
        Ok(Self { locs, raw_scales })
    }

    /// Standard normal on every coordinate.
    pub fn standard(dim: usize) -> Self {
        Self {
            locs: vec![0.0; dim],
            raw_scales: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.locs.len()
    }

    pub fn locs(&self) -> &[f64] {
        &self.locs
    }

    pub fn raw_scales(&self) -> &[f64] {
        &self.raw_scales
    }

    pub fn scales(&self) -> Vec<f64> {
        self.raw_scales.iter().map(|r| r.exp()).collect()
    }

    pub fn coordinate(&self, i: usize) -> Normal1D {
        Normal1D {
            loc: self.locs[i],
            scale: self.raw_scales[i].exp(),
        }
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.locs.iter().zip(&self.raw_scales))
            .map(|(v, (m, r))| normal_log_pdf(*v, *m, r.exp()))
            .sum())
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.locs
            .iter()
            .zip(&self.raw_scales)
            .map(|(m, r)| m + r.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Closed-form `KL[self ‖ other]`, summed over independent coordinates.
    pub fn kl(&self, other: &MeanFieldGaussian) -> Result<f64> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok((0..self.dim())
            .map(|i| kl_normal_normal(&self.coordinate(i), &other.coordinate(i)))
            .sum())
    }

    /// The `m`-fold independent product `q(Θ)^m`, as one wider mean-field.
    pub fn iid_power(&self, m: usize) -> Self {
        Self {
            locs: self.locs.repeat(m),
            raw_scales: self.raw_scales.repeat(m),
        }
    }
}

/// `KL[q^m ‖ r^m] = m KL[q ‖ r]` for i.i.d. products.
pub fn kl_iid(q: &MeanFieldGaussian, r: &MeanFieldGaussian, m: usize) -> Result<f64> {
    Ok(m as f64 * q.kl(r)?)
}
