//! Solvers for the one-dimensional location model `p(x|θ) = N(x; θ, s)`.
//!
//! - [`conjugate_posterior`]: the closed-form Bayes posterior under a Normal prior.
//! - [`fixed_point_pacpred`]: grid minimizer of the m → ∞ multisample objective.
//! - [`atomic_erm`]: uniform-weight atomic fit of the empirical predictive risk.
//! - [`toy_optima`]: minimizers of the true inferential and predictive risks.

use crate::distributions::{
    normal_log_pdf, normal_pdf, AtomicMixture, GridDensity, LogDensity1D, MixtureNormal1D,
    Normal1D, ParamDistribution,
};
use crate::error::{usage, Error, Result};
use crate::models::{LearningRate, OptimizerKind, OptimizerState};
use crate::numerics::{lse_unchecked, normalize_log_density, Grid1D};
use crate::Rng;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Closed-form posterior by precision addition.
pub fn conjugate_posterior(prior: &Normal1D, data: &[f64], model_scale: f64) -> Result<Normal1D> {
    if !(model_scale > 0.0) {
        return usage(format!("model scale must be positive, got {model_scale}"));
    }
    let prior_precision = prior.variance().recip();
    let like_precision = model_scale.powi(2).recip();
    let precision = prior_precision + data.len() as f64 * like_precision;
    let loc = (prior.loc() * prior_precision + data.iter().sum::<f64>() * like_precision) / precision;
    Normal1D::new(loc, precision.recip().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub grid: Grid1D,
    pub alpha: f64,
    pub beta: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            grid: Grid1D::new(-30.0, 30.0, 500).expect("default grid"),
            alpha: 0.9,
            beta: 1.0,
            tol: 1e-8,
            max_iters: 5000,
        }
    }
}

impl FixedPointConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return usage(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if !(self.beta > 0.0) {
            return usage(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.tol > 0.0) {
            return usage(format!("tolerance must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return usage("max_iters must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    pub density: GridDensity,
    pub iterations: usize,
    /// Sup-norm change of the density at the last iteration.
    pub residual: f64,
    pub converged: bool,
    /// Residual after every iteration.
    pub residuals: Vec<f64>,
}

/// Damped fixed-point iteration for the grid density minimizing
/// `-(1/n) Σ log ∫ q p(x_i|θ) dθ + KL(q ‖ r) / (β n)`.
///
/// The data marginals start at the prior predictive and `q` at the
/// discretized prior.
pub fn fixed_point_pacpred(
    prior: &Normal1D,
    data: &[f64],
    model_scale: f64,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult> {
    cfg.validate()?;
    if !(model_scale > 0.0) {
        return usage(format!("model scale must be positive, got {model_scale}"));
    }
    let grid = cfg.grid;
    let thetas = grid.points();
    let log_prior: Vec<f64> = thetas.iter().map(|t| prior.log_prob(*t)).collect();
    // likelihood table, one row per datum
    let lik: Vec<Vec<f64>> = data
        .iter()
        .map(|x| thetas.iter().map(|t| normal_pdf(*x, *t, model_scale)).collect())
        .collect();
    let marginal = |q: &[f64], row: &[f64]| -> f64 {
        q.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() * grid.step()
    };

    let mut q = normalize_log_density(grid, &log_prior)?.probs().to_vec();
    let mut p: Vec<f64> = lik.iter().map(|row| marginal(&q, row)).collect();
    let mut residuals = Vec::new();
    let mut logits = vec![0.0; thetas.len()];
    for iter in 1..=cfg.max_iters {
        for (k, l) in logits.iter_mut().enumerate() {
            let boltzmann: f64 = lik.iter().zip(&p).map(|(row, pi)| row[k] / pi).sum();
            *l = log_prior[k] + cfg.beta * boltzmann;
        }
        let next = normalize_log_density(grid, &logits)?.probs().to_vec();
        let residual = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        for (pi, row) in p.iter_mut().zip(&lik) {
            *pi = cfg.alpha * *pi + (1.0 - cfg.alpha) * marginal(&q, row);
        }
        residuals.push(residual);
        if residual < cfg.tol {
            return Ok(FixedPointResult {
                density: GridDensity::new(grid, q)?,
                iterations: iter,
                residual,
                converged: true,
                residuals,
            });
        }
    }
    let residual = *residuals.last().expect("at least one iteration");
    Ok(FixedPointResult {
        density: GridDensity::new(grid, q)?,
        iterations: cfg.max_iters,
        residual,
        converged: false,
        residuals,
    })
}

/// The m → ∞ multisample objective of a grid density, with the prior
/// discretized on the same grid for the KL term.
pub fn pacpred_objective(
    q: &GridDensity,
    prior: &Normal1D,
    data: &[f64],
    model_scale: f64,
    beta: f64,
) -> Result<f64> {
    if data.is_empty() {
        return usage("objective needs data");
    }
    let r = GridDensity::discretize(*q.grid(), |t| prior.log_prob(t))?;
    let kl = crate::distributions::kl_grid(q, &r)?;
    let n = data.len() as f64;
    let nll = -data
        .iter()
        .map(|x| q.log_predictive_density(model_scale, *x))
        .sum::<f64>()
        / n;
    Ok(nll + kl / (beta * n))
}

/// `-(1/n) Σ_i log((1/k) Σ_c N(x_i; θ_c, s))`.
pub fn atomic_pred_risk(data: &[f64], locs: &[f64], model_scale: f64) -> f64 {
    let ln_k = (locs.len() as f64).ln();
    let mut buf = vec![0.0; locs.len()];
    let total: f64 = data
        .iter()
        .map(|x| {
            for (b, t) in buf.iter_mut().zip(locs) {
                *b = normal_log_pdf(*x, *t, model_scale);
            }
            lse_unchecked(&buf) - ln_k
        })
        .sum();
    -total / data.len() as f64
}

/// Gradient of [`atomic_pred_risk`] with respect to each location.
fn atomic_pred_grad(data: &[f64], locs: &[f64], model_scale: f64) -> Vec<f64> {
    let mut grad = vec![0.0; locs.len()];
    let mut logs = vec![0.0; locs.len()];
    let var = model_scale * model_scale;
    let n = data.len() as f64;
    for x in data {
        for (l, t) in logs.iter_mut().zip(locs) {
            *l = normal_log_pdf(*x, *t, model_scale);
        }
        let norm = lse_unchecked(&logs);
        for ((g, l), t) in grad.iter_mut().zip(&logs).zip(locs) {
            let resp = (l - norm).exp();
            *g -= resp * (x - t) / var / n;
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomicErmConfig {
    pub atoms: usize,
    pub lr: f64,
    pub tol: f64,
    pub max_steps: usize,
    /// Standard deviation of the jitter added to resampled data at init.
    pub init_jitter: f64,
}

impl Default for AtomicErmConfig {
    fn default() -> Self {
        Self {
            atoms: 300,
            lr: 0.1,
            tol: 1e-5,
            max_steps: 200_000,
            init_jitter: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicFit {
    /// Uniform-weight atoms in parameter space.
    pub posterior: AtomicMixture,
    /// Same atoms convolved with the model scale: the fitted mixture over data.
    pub predictive: AtomicMixture,
    pub risk_trace: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
}

/// Adagrad on the atom locations of a uniform mixture until the largest
/// update falls below `cfg.tol`.
pub fn atomic_erm(
    data: &[f64],
    model_scale: f64,
    cfg: &AtomicErmConfig,
    rng: &mut Rng,
) -> Result<AtomicFit> {
    if cfg.atoms == 0 {
        return usage("atomic fit needs at least one atom");
    }
    if data.is_empty() {
        return usage("atomic fit needs data");
    }
    if !(model_scale > 0.0) {
        return usage(format!("model scale must be positive, got {model_scale}"));
    }
    let jitter = Normal::new(0.0, cfg.init_jitter).map_err(|e| Error::Usage(e.to_string()))?;
    let mut locs: Vec<f64> = (0..cfg.atoms)
        .map(|_| data[rng.random_range(0..data.len())] + jitter.sample(rng))
        .collect();
    let mut opt = OptimizerState::new(OptimizerKind::Adagrad, cfg.atoms, LearningRate::constant(cfg.lr))?;
    let mut risk_trace = vec![atomic_pred_risk(data, &locs, model_scale)];
    let mut converged = false;
    let mut steps = 0;
    while steps < cfg.max_steps {
        let grad = atomic_pred_grad(data, &locs, model_scale);
        let largest = opt.update(&mut locs, &grad)?;
        steps += 1;
        risk_trace.push(atomic_pred_risk(data, &locs, model_scale));
        if largest < cfg.tol {
            converged = true;
            break;
        }
    }
    let posterior = AtomicMixture::uniform(locs, 0.0)?;
    let predictive = posterior.convolved(model_scale);
    Ok(AtomicFit {
        posterior,
        predictive,
        risk_trace,
        steps,
        converged,
    })
}

/// Minimizers of the true risks for a Normal-mixture truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOptima {
    /// Single atom at the mean of ν.
    pub inf_opt: AtomicMixture,
    /// Distribution whose predictive reproduces ν exactly.
    pub pred_opt: AtomicMixture,
}

/// Optima of the true inferential and predictive risks.
///
/// The predictive optimum deconvolves ν: atoms at ν's locations with
/// scale `sqrt(s_ν² - s²)`, which is a pure atomic comb when `s_ν = s`. It
/// needs every ν component to share one scale no smaller than the model's.
pub fn toy_optima(nu: &MixtureNormal1D, model_scale: f64) -> Result<ToyOptima> {
    let inf_opt = AtomicMixture::point_mass(nu.mean());
    let s_nu = nu.scales()[0];
    if nu.scales().iter().any(|s| (s - s_nu).abs() > 1e-12 * s_nu) {
        return Err(Error::PredOptUnavailable(
            "components of the truth have different scales".into(),
        ));
    }
    if s_nu < model_scale * (1.0 - 1e-12) {
        return Err(Error::PredOptUnavailable(format!(
            "truth component scale {s_nu} is below the model scale {model_scale}"
        )));
    }
    let residual = (s_nu * s_nu - model_scale * model_scale).max(0.0).sqrt();
    let pred_opt = AtomicMixture::new(nu.weights().to_vec(), nu.locs().to_vec(), residual)?;
    Ok(ToyOptima { inf_opt, pred_opt })
}

/// The maximum-likelihood location: a single atom at the sample mean.
pub fn max_likelihood(data: &[f64]) -> Result<AtomicMixture> {
    if data.is_empty() {
        return usage("maximum likelihood needs data");
    }
    Ok(AtomicMixture::point_mass(
        data.iter().sum::<f64>() / data.len() as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Sample1D;
    use crate::objectives::{covering_grid, kl_nu_to_predictive, true_risks_toy};
    use crate::seeded_rng;
    use approx::assert_abs_diff_eq;

    fn prior() -> Normal1D {
        Normal1D::new(0.0, 3.0).unwrap()
    }

    fn nu() -> MixtureNormal1D {
        MixtureNormal1D::new(vec![0.3, 0.7], vec![-2.0, 2.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn conjugate_examples() {
        assert_eq!(conjugate_posterior(&prior(), &[], 1.0).unwrap(), prior());
        let q = conjugate_posterior(&prior(), &[-2.0, -1.0, 0.0, 1.0, 2.0], 1.0).unwrap();
        assert_abs_diff_eq!(q.loc(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.variance(), 9.0 / 46.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.variance(), 0.19565, epsilon = 1e-5);
        let big: Vec<f64> = (0..100_000).map(|i| 1.5 + if i % 2 == 0 { 0.3 } else { -0.3 }).collect();
        let q = conjugate_posterior(&prior(), &big, 1.0).unwrap();
        assert!((q.loc() - 1.5).abs() < 1e-4 && q.scale() < 0.01);
        assert!(conjugate_posterior(&prior(), &[1.0], 0.0).is_err());
    }

    #[test]
    fn conjugate_minimizes_elbo_on_grid() {
        // ELBO over Normal(loc, scale) with β = 1 in closed form:
        // E_q[-log p(x_i|θ)] = ½ log 2π + ((x_i - loc)² + scale²)/2
        let data = nu().sample(&mut seeded_rng(5), 5);
        let q = conjugate_posterior(&prior(), &data, 1.0).unwrap();
        let r = prior();
        let elbo = |loc: f64, scale: f64| {
            let cand = Normal1D::new(loc, scale).unwrap();
            let nll: f64 = data
                .iter()
                .map(|x| 0.5 * (2.0 * std::f64::consts::PI).ln() + ((x - loc).powi(2) + scale * scale) / 2.0)
                .sum::<f64>()
                / 5.0;
            nll + crate::distributions::kl_normal_normal(&cand, &r) / 5.0
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=400 {
            for j in 1..=200 {
                let loc = q.loc() - 1.0 + i as f64 * 0.005;
                let scale = j as f64 * 0.005;
                let v = elbo(loc, scale);
                if v < best.0 {
                    best = (v, loc, scale);
                }
            }
        }
        assert!((best.1 - q.loc()).abs() <= 0.005);
        assert!((best.2 - q.scale()).abs() <= 0.005);
    }

    #[test]
    fn fixed_point_without_data_is_prior() {
        let cfg = FixedPointConfig::default();
        let res = fixed_point_pacpred(&prior(), &[], 1.0, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        let expected = GridDensity::discretize(cfg.grid, |t| prior().log_prob(t)).unwrap();
        for (a, b) in res.density.probs().iter().zip(expected.probs()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn fixed_point_small_beta_is_prior() {
        let cfg = FixedPointConfig { beta: 1e-9, ..Default::default() };
        let data = [1.0, 2.5, -0.3];
        let res = fixed_point_pacpred(&prior(), &data, 1.0, &cfg).unwrap();
        let expected = GridDensity::discretize(cfg.grid, |t| prior().log_prob(t)).unwrap();
        let worst = res
            .density
            .probs()
            .iter()
            .zip(expected.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn fixed_point_beats_conjugate_on_toy() {
        let cfg = FixedPointConfig::default();
        for seed in 0..3 {
            let data = nu().sample(&mut seeded_rng(seed), 5);
            let res = fixed_point_pacpred(&prior(), &data, 1.0, &cfg).unwrap();
            assert!(res.converged, "seed {seed}: residual {}", res.residual);
            assert!(res.residual < 1e-8);
            let conj = conjugate_posterior(&prior(), &data, 1.0).unwrap();
            let conj_grid = GridDensity::discretize(cfg.grid, |t| conj.log_prob(t)).unwrap();
            let fp = pacpred_objective(&res.density, &prior(), &data, 1.0, 1.0).unwrap();
            let cj = pacpred_objective(&conj_grid, &prior(), &data, 1.0, 1.0).unwrap();
            assert!(fp < cj, "seed {seed}: {fp} vs {cj}");
        }
    }

    #[test]
    fn fixed_point_residuals_settle() {
        let data = nu().sample(&mut seeded_rng(0), 5);
        let res = fixed_point_pacpred(&prior(), &data, 1.0, &FixedPointConfig::default()).unwrap();
        let windows: Vec<f64> = res.residuals[20..]
            .chunks(10)
            .filter(|c| c.len() == 10)
            .map(|c| c.iter().sum::<f64>() / 10.0)
            .collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} after {}", w[1], w[0]);
        }
    }

    #[test]
    fn fixed_point_reports_non_convergence() {
        let cfg = FixedPointConfig { max_iters: 3, ..Default::default() };
        let res = fixed_point_pacpred(&prior(), &[0.5, 3.0], 1.0, &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 3);
        assert_abs_diff_eq!(res.density.mass(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn fixed_point_config_validation() {
        let bad = FixedPointConfig { alpha: 1.0, ..Default::default() };
        assert!(fixed_point_pacpred(&prior(), &[1.0], 1.0, &bad).is_err());
    }

    #[test]
    fn atomic_single_point_collapses() {
        let cfg = AtomicErmConfig { atoms: 7, ..Default::default() };
        let fit = atomic_erm(&[1.3], 1.0, &cfg, &mut seeded_rng(2)).unwrap();
        assert!(fit.converged);
        for l in fit.posterior.locs() {
            assert_abs_diff_eq!(*l, 1.3, epsilon = 1e-3);
        }
        let risk = *fit.risk_trace.last().unwrap();
        assert_abs_diff_eq!(risk, 0.918939, epsilon = 1e-6);
    }

    #[test]
    fn atomic_two_far_points() {
        let data = [-10.0, 10.0];
        let cfg = AtomicErmConfig { atoms: 2, ..Default::default() };
        let fit = atomic_erm(&data, 1.0, &cfg, &mut seeded_rng(8)).unwrap();
        let mut locs = fit.posterior.locs().to_vec();
        locs.sort_by(f64::total_cmp);
        // grid-scan oracle over location pairs
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=200 {
            for j in 0..=200 {
                let a = -11.0 + i as f64 * 0.01;
                let b = 9.0 + j as f64 * 0.01;
                let r = atomic_pred_risk(&data, &[a, b], 1.0);
                if r < best.0 {
                    best = (r, a, b);
                }
            }
        }
        assert!((locs[0] - best.1).abs() <= 0.01 && (locs[1] - best.2).abs() <= 0.01);
    }

    #[test]
    fn nearby_points_prefer_merged_mass() {
        let data = [0.0, 0.5];
        let merged = atomic_pred_risk(&data, &[0.25; 10], 1.0);
        let split: Vec<f64> = (0..10).map(|i| if i < 5 { 0.0 } else { 0.5 }).collect();
        assert!(merged < atomic_pred_risk(&data, &split, 1.0));
    }

    #[test]
    fn atomic_risk_monotone() {
        let data = nu().sample(&mut seeded_rng(3), 5);
        let fit = atomic_erm(&data, 1.0, &AtomicErmConfig::default(), &mut seeded_rng(4)).unwrap();
        assert!(fit.converged);
        for w in fit.risk_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        assert_eq!(fit.predictive.component_scale(), 1.0);
        assert_eq!(fit.posterior.component_scale(), 0.0);
    }

    #[test]
    fn atomic_gradient_matches_differences() {
        let data = [0.3, -1.2, 2.0];
        let locs = [0.1, 0.8, -0.5];
        let g = atomic_pred_grad(&data, &locs, 1.0);
        for k in 0..3 {
            let mut up = locs;
            let mut down = locs;
            up[k] += 1e-6;
            down[k] -= 1e-6;
            let numeric = (atomic_pred_risk(&data, &up, 1.0) - atomic_pred_risk(&data, &down, 1.0)) / 2e-6;
            assert_abs_diff_eq!(g[k], numeric, epsilon = 1e-8);
        }
    }

    #[test]
    fn optima_examples() {
        let opt = toy_optima(&nu(), 1.0).unwrap();
        assert_abs_diff_eq!(opt.inf_opt.locs()[0], 0.8, epsilon = 1e-12);
        assert_eq!(opt.pred_opt.weights(), &[0.3, 0.7]);
        assert_eq!(opt.pred_opt.locs(), &[-2.0, 2.0]);
        let grid = covering_grid(&nu(), 12.0, 0.01).unwrap();
        assert!(kl_nu_to_predictive(&opt.pred_opt, &nu(), 1.0, &grid).unwrap().abs() < 1e-10);

        let sym = MixtureNormal1D::new(vec![0.5, 0.5], vec![-3.0, 3.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(toy_optima(&sym, 1.0).unwrap().inf_opt.locs()[0], 0.0);
    }

    #[test]
    fn optima_scale_handling() {
        let narrow = MixtureNormal1D::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert!(matches!(toy_optima(&narrow, 1.0), Err(Error::PredOptUnavailable(_))));
        let mixed = MixtureNormal1D::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 2.0]).unwrap();
        assert!(toy_optima(&mixed, 1.0).is_err());

        let wide = MixtureNormal1D::new(vec![0.3, 0.7], vec![-4.0, 4.0], vec![2.0, 2.0]).unwrap();
        let opt = toy_optima(&wide, 1.0).unwrap();
        assert_abs_diff_eq!(opt.pred_opt.component_scale(), 3f64.sqrt(), epsilon = 1e-15);
        let grid = covering_grid(&wide, 12.0, 0.01).unwrap();
        assert!(kl_nu_to_predictive(&opt.pred_opt, &wide, 1.0, &grid).unwrap().abs() < 1e-10);
    }

    #[test]
    fn max_likelihood_is_sample_mean() {
        let ml = max_likelihood(&[1.0, 2.0, 6.0]).unwrap();
        assert_eq!(ml.locs(), &[3.0]);
        let grid = covering_grid(&nu(), 12.0, 0.02).unwrap();
        let risks = true_risks_toy(&ml, &nu(), 1.0, &grid).unwrap();
        assert_abs_diff_eq!(risks.true_inf, risks.true_pred, epsilon = 1e-12);
    }
}
