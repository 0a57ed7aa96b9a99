//! Held-out evaluation: negative log posterior predictive and KL to the truth.

use ndarray::Array2;
use pacm_core::distributions::{normal_pdf, LogDensity1D, Normal1D, HALF_LN_2PI};
use pacm_core::models::{mlp_predict, Likelihood, ModelSpec, VariationalPosterior};
use pacm_core::numerics::{mean_and_se, Grid1D};
use pacm_core::{Error, Rng};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GenerativeTruth};
use crate::error::CliResult;

/// Truth scales covered by the KL grid on each side.
pub const GRID_WIDTH_SCALES: f64 = 8.0;
/// Gaussian integrands are resolved far below double precision at a quarter scale.
pub const GRID_MAX_STEP: f64 = 0.25;
pub const GRID_COVERAGE: f64 = 1.0 - 1e-6;
/// Component contributions beyond this many scales underflow anyway.
const WINDOW_SCALES: f64 = 38.0;
const LINEAR_FLOOR: f64 = 1e-290;

/// Network outputs for a fixed set of posterior draws at fixed inputs.
#[derive(Debug, Clone)]
pub struct PredictiveDraws {
    likelihood: Likelihood,
    /// One `inputs × width` block per draw.
    outputs: Vec<Array2<f64>>,
}

impl PredictiveDraws {
    pub fn new(model: &ModelSpec, thetas: &[Vec<f64>], x: &[f64]) -> CliResult<Self> {
        let xc = Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column");
        let outputs = thetas
            .iter()
            .map(|t| mlp_predict(t, &model.arch, &xc))
            .collect::<pacm_core::Result<Vec<_>>>()?;
        Ok(Self {
            likelihood: model.likelihood,
            outputs,
        })
    }

    pub fn draws(&self) -> usize {
        self.outputs.len()
    }

    fn scale(&self) -> f64 {
        match self.likelihood {
            Likelihood::Normal { scale } | Likelihood::EqualMixture { scale, .. } => scale,
        }
    }

    /// Component means of draw `j` at input `i`; components carry equal weight.
    fn means(&self, j: usize, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.outputs[j].row(i)
    }

    /// `log p(y | x_i, θ_j)` for every draw.
    pub fn log_liks(&self, i: usize, y: f64) -> Vec<f64> {
        (0..self.draws())
            .map(|j| {
                let row = self.means(j, i);
                self.likelihood
                    .log_prob_value(row.as_slice().expect("contiguous row"), y)
            })
            .collect()
    }

    /// Every component mean at input `i`, sorted. All carry weight `1 / len`.
    fn sorted_means(&self, i: usize) -> Vec<f64> {
        let mut all: Vec<f64> = (0..self.draws()).flat_map(|j| self.means(j, i).to_vec()).collect();
        all.sort_by(f64::total_cmp);
        all
    }

    /// `log p̂(y | x_i)` at every grid point, the Monte-Carlo predictive over the draws.
    pub fn log_density_on_grid(&self, i: usize, grid: &Grid1D) -> Vec<f64> {
        let s = self.scale();
        let means = self.sorted_means(i);
        let count = grid.count();
        let (lo, step) = (grid.lo(), grid.step());
        let w = 1.0 / means.len() as f64;
        let mut lin = vec![0.0; count];
        for &mu in &means {
            let a = ((mu - WINDOW_SCALES * s - lo) / step).floor().max(0.0);
            let b = ((mu + WINDOW_SCALES * s - lo) / step).ceil();
            if b < 0.0 || a >= count as f64 {
                continue;
            }
            let (a, b) = (a as usize, (b as usize).min(count - 1));
            for (k, slot) in lin.iter_mut().enumerate().take(b + 1).skip(a) {
                *slot += w * normal_pdf(grid.point(k), mu, s);
            }
        }
        (0..count)
            .map(|k| {
                if lin[k] > LINEAR_FLOOR {
                    lin[k].ln()
                } else {
                    log_density_sorted(&means, s, grid.point(k))
                }
            })
            .collect()
    }

    /// Mean and standard deviation of the predictive at input `i`.
    pub fn moments(&self, i: usize) -> (f64, f64) {
        let s2 = self.scale().powi(2);
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..self.draws() {
            let means = self.means(j, i);
            let w = 1.0 / means.len() as f64;
            for &mu in means {
                m1 += w * mu;
                m2 += w * (mu * mu + s2);
            }
        }
        let jn = self.draws() as f64;
        let (m1, m2) = (m1 / jn, m2 / jn);
        (m1, (m2 - m1 * m1).max(0.0).sqrt())
    }

    /// Predictive mass in `[lo, hi]` at input `i`.
    pub fn mass_between(&self, i: usize, lo: f64, hi: f64) -> f64 {
        let s = self.scale();
        let mut total = 0.0;
        for j in 0..self.draws() {
            let means = self.means(j, i);
            let w = 1.0 / means.len() as f64;
            for &mu in means {
                let n = Normal1D::new(mu, s).expect("positive scale");
                total += w * (n.cdf(hi) - n.cdf(lo));
            }
        }
        total / self.draws() as f64
    }
}

/// Terms more than this many nats below the largest one are dropped.
const PRUNE_NATS: f64 = 60.0;

/// `log (1/J) Σ_j N(y; μ_j, s)` for sorted means, summing only terms within
/// `PRUNE_NATS` of the nearest mean's term.
fn log_density_sorted(means: &[f64], s: f64, y: f64) -> f64 {
    let idx = means.partition_point(|m| *m < y);
    let nearest = match (idx.checked_sub(1), means.get(idx)) {
        (Some(l), Some(r)) => (y - means[l]).min(r - y),
        (Some(l), None) => y - means[l],
        (None, Some(r)) => r - y,
        (None, None) => return f64::NEG_INFINITY,
    };
    let base = 0.5 * (nearest / s).powi(2);
    let term = |mu: f64| 0.5 * ((y - mu) / s).powi(2) - base;
    let mut total = 0.0;
    for &mu in &means[idx..] {
        let t = term(mu);
        if t > PRUNE_NATS {
            break;
        }
        total += (-t).exp();
    }
    for &mu in means[..idx].iter().rev() {
        let t = term(mu);
        if t > PRUNE_NATS {
            break;
        }
        total += (-t).exp();
    }
    -base + total.ln() - s.ln() - HALF_LN_2PI - (means.len() as f64).ln()
}

/// `(grid, log p*)` on the evaluation grid for `x`, checked for coverage.
pub fn truth_grid(truth: &GenerativeTruth, x: f64) -> CliResult<(Grid1D, Vec<f64>)> {
    truth_grid_with(truth, x, GRID_WIDTH_SCALES)
}

fn truth_grid_with(truth: &GenerativeTruth, x: f64, widths: f64) -> CliResult<(Grid1D, Vec<f64>)> {
    let (lo, hi) = truth.y_range(x, widths);
    let grid = Grid1D::with_max_step(lo, hi, GRID_MAX_STEP)?;
    let cond = truth.conditional(x);
    let log_p: Vec<f64> = grid.points().iter().map(|&y| cond.log_prob(y)).collect();
    let mass = grid.integrate(&log_p.iter().map(|l| l.exp()).collect::<Vec<_>>());
    if mass < GRID_COVERAGE {
        return Err(Error::GridCoverage {
            captured: mass,
            required: GRID_COVERAGE,
        }
        .into());
    }
    Ok((grid, log_p))
}

/// `∫ p* log(p* / p̂) dy` at input `i` by quadrature on the truth grid.
pub fn kl_at(truth: &GenerativeTruth, draws: &PredictiveDraws, x: f64, i: usize) -> CliResult<f64> {
    let (grid, log_p) = truth_grid(truth, x)?;
    let log_q = draws.log_density_on_grid(i, &grid);
    Ok(kl_on_grid(&grid, &log_p, &log_q))
}

fn kl_on_grid(grid: &Grid1D, log_p: &[f64], log_q: &[f64]) -> f64 {
    let integrand: Vec<f64> = log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .collect();
    grid.integrate(&integrand)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Negative log posterior predictive averaged over the test points, in nats.
    pub lpp: f64,
    pub lpp_se: f64,
    /// Mean over test inputs of `KL(p*(·|x) ‖ p̂(·|x))`, in nats.
    pub kl_to_truth: f64,
    pub kl_se: f64,
}

fn draw_thetas(post: &VariationalPosterior, eval_samples: usize, rng: &mut Rng) -> CliResult<Vec<Vec<f64>>> {
    if eval_samples == 0 {
        return Err(crate::error::CliError::Config("eval_samples must be at least 1".into()));
    }
    Ok(post.sample_iid(rng, eval_samples))
}

pub fn evaluate_model(
    model: &ModelSpec,
    post: &VariationalPosterior,
    truth: &GenerativeTruth,
    test: &Dataset,
    eval_samples: usize,
    rng: &mut Rng,
) -> CliResult<Evaluation> {
    let thetas = draw_thetas(post, eval_samples, rng)?;
    let draws = PredictiveDraws::new(model, &thetas, &test.x)?;
    let nll: Vec<f64> = test
        .y
        .iter()
        .enumerate()
        .map(|(i, &y)| -pacm_core::numerics::log_mean_exp(&draws.log_liks(i, y)).expect("non-empty"))
        .collect();
    let kls = test
        .x
        .iter()
        .enumerate()
        .map(|(i, &x)| kl_at(truth, &draws, x, i))
        .collect::<CliResult<Vec<f64>>>()?;
    let (lpp, lpp_se) = mean_and_se(&nll);
    let (kl_to_truth, kl_se) = mean_and_se(&kls);
    Ok(Evaluation {
        lpp,
        lpp_se,
        kl_to_truth,
        kl_se,
    })
}

/// Predictive summary at one probe input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub x: f64,
    pub truth_mean: f64,
    pub truth_std: f64,
    pub predictive_mean: f64,
    pub predictive_std: f64,
    /// Predictive mass within ±2 of `+μ_x`.
    pub mass_near_plus: f64,
    /// Predictive mass within ±2 of `-μ_x`.
    pub mass_near_minus: f64,
    pub kl_nats: f64,
}

/// Densities on the truth grid at one probe input.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCurve {
    pub x: f64,
    pub y: Vec<f64>,
    pub predictive: Vec<f64>,
    pub truth: Vec<f64>,
}

pub const PROBE_WINDOW: f64 = 2.0;

pub fn probe_report(
    model: &ModelSpec,
    post: &VariationalPosterior,
    truth: &GenerativeTruth,
    probes: &[f64],
    eval_samples: usize,
    rng: &mut Rng,
) -> CliResult<(Vec<ProbeStats>, Vec<ProbeCurve>)> {
    let thetas = draw_thetas(post, eval_samples, rng)?;
    let draws = PredictiveDraws::new(model, &thetas, probes)?;
    let mut stats = Vec::with_capacity(probes.len());
    let mut curves = Vec::with_capacity(probes.len());
    for (i, &x) in probes.iter().enumerate() {
        let mu = crate::data::sinusoid_mean(x);
        let cond = truth.conditional(x);
        let (pm, ps) = draws.moments(i);
        let (grid, log_p) = truth_grid(truth, x)?;
        let log_q = draws.log_density_on_grid(i, &grid);
        let kl = kl_on_grid(&grid, &log_p, &log_q);
        stats.push(ProbeStats {
            x,
            truth_mean: cond.mean(),
            truth_std: cond.variance().sqrt(),
            predictive_mean: pm,
            predictive_std: ps,
            mass_near_plus: draws.mass_between(i, mu - PROBE_WINDOW, mu + PROBE_WINDOW),
            mass_near_minus: draws.mass_between(i, -mu - PROBE_WINDOW, -mu + PROBE_WINDOW),
            kl_nats: kl,
        });
        curves.push(ProbeCurve {
            x,
            y: grid.points(),
            predictive: log_q.iter().map(|l| l.exp()).collect(),
            truth: log_p.iter().map(|l| l.exp()).collect(),
        });
    }
    Ok((stats, curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sinusoid_mean, X_HI, X_LO};
    use approx::assert_abs_diff_eq;
    use pacm_core::distributions::{normal_log_pdf, MeanFieldGaussian};
    use pacm_core::numerics::log_sum_exp;
    use pacm_core::models::{Activation, MlpArch};
    use pacm_core::seeded_rng;

    /// A `[1, 1]` linear network with weight `w` and bias `b`, collapsed posterior.
    fn linear(w: f64, b: f64, likelihood: Likelihood) -> (ModelSpec, VariationalPosterior) {
        let width = likelihood.output_width();
        let arch = MlpArch::new(vec![1, width], Activation::Tanh).unwrap();
        let mut locs = vec![w; width];
        locs.extend(vec![b; width]);
        let d = locs.len();
        let q = MeanFieldGaussian::new(locs, vec![-40.0; d]).unwrap();
        (
            ModelSpec::new(arch, likelihood).unwrap(),
            VariationalPosterior::mean_field(q),
        )
    }

    #[test]
    fn self_kl_is_near_zero() {
        // Constant-mean truth N(0, 1) is matched by a collapsed zero network.
        let truth = GenerativeTruth::Rademacher { scale: 1.0 };
        let (model, post) = linear(0.0, 0.0, Likelihood::Normal { scale: 1.0 });
        let test = Dataset {
            x: vec![0.0; 4],
            y: vec![0.3, -1.0, 2.0, 0.0],
            generator_tag: "t".into(),
            seed: 0,
        };
        let ev = evaluate_model(&model, &post, &truth, &test, 3, &mut seeded_rng(1)).unwrap();
        assert!(ev.kl_to_truth.abs() < 1e-3, "{}", ev.kl_to_truth);
        assert!(ev.kl_to_truth > -1e-6);
    }

    #[test]
    fn well_specified_oracle_kl_is_near_zero() {
        // Outputs (+μ, -μ) reproduce the Rademacher truth exactly where the
        // network is linear, so test at x = 0 where μ_0 = 0 and at a point
        // with outputs fixed by the bias alone.
        let truth = GenerativeTruth::Rademacher { scale: 1.0 };
        let x = 2.0 * std::f64::consts::PI / 3.0;
        let mu = sinusoid_mean(x);
        let arch = MlpArch::new(vec![1, 2], Activation::Tanh).unwrap();
        let locs = vec![0.0, 0.0, mu, -mu];
        let q = MeanFieldGaussian::new(locs, vec![-40.0; 4]).unwrap();
        let model = ModelSpec::new(
            arch,
            Likelihood::EqualMixture {
                components: 2,
                scale: 1.0,
            },
        )
        .unwrap();
        let post = VariationalPosterior::mean_field(q);
        let test = Dataset {
            x: vec![x],
            y: vec![mu],
            generator_tag: "t".into(),
            seed: 0,
        };
        let ev = evaluate_model(&model, &post, &truth, &test, 2, &mut seeded_rng(2)).unwrap();
        assert!(ev.kl_to_truth.abs() < 1e-3, "{}", ev.kl_to_truth);
    }

    #[test]
    fn collapsed_unimodal_against_bimodal_truth() {
        let truth = GenerativeTruth::Rademacher { scale: 1.0 };
        let x = 2.0 * std::f64::consts::PI / 3.0;
        let mu = sinusoid_mean(x);
        let (model, post) = linear(0.0, 0.0, Likelihood::Normal { scale: 1.0 });
        let draws = PredictiveDraws::new(&model, &post.sample_iid(&mut seeded_rng(3), 5), &[x]).unwrap();
        let kl = kl_at(&truth, &draws, x, 0).unwrap();
        // Oracle: fine independent trapezoid rule on the analytic densities.
        let (lo, hi) = (-mu - 12.0, mu + 12.0);
        let k = 200_000;
        let h = (hi - lo) / k as f64;
        let mut oracle = 0.0;
        for t in 0..=k {
            let y = lo + h * t as f64;
            let p = 0.5 * normal_pdf(y, mu, 1.0) + 0.5 * normal_pdf(y, -mu, 1.0);
            let wt = if t == 0 || t == k { 0.5 } else { 1.0 };
            oracle += wt * h * p * (p.ln() - normal_log_pdf(y, 0.0, 1.0));
        }
        assert!(kl > 2.0);
        assert_abs_diff_eq!(kl, oracle, epsilon = 1e-6);
    }

    #[test]
    fn lpp_with_one_draw_is_single_draw_nll() {
        let truth = GenerativeTruth::Sinusoid { noise: 10.0 };
        let arch = MlpArch::new(vec![1, 3, 1], Activation::Tanh).unwrap();
        let d = arch.param_count();
        let q = MeanFieldGaussian::new(vec![0.2; d], vec![-1.0; d]).unwrap();
        let model = ModelSpec::new(arch, Likelihood::Normal { scale: 1.0 }).unwrap();
        let post = VariationalPosterior::mean_field(q.clone());
        let test = crate::data::sample_dataset(&truth, 50, 4);
        let ev = evaluate_model(&model, &post, &truth, &test, 1, &mut seeded_rng(5)).unwrap();
        let theta = post.sample_iid(&mut seeded_rng(5), 1).remove(0);
        let pred = mlp_predict(&theta, &model.arch, &test.x_column()).unwrap();
        let nll = test
            .y
            .iter()
            .enumerate()
            .map(|(i, &y)| -normal_log_pdf(y, pred[[i, 0]], 1.0))
            .sum::<f64>()
            / 50.0;
        assert_abs_diff_eq!(ev.lpp, nll, epsilon = 1e-10);
    }

    #[test]
    fn grid_density_matches_direct_sum() {
        let arch = MlpArch::new(vec![1, 4, 1], Activation::Elu).unwrap();
        let d = arch.param_count();
        let q = MeanFieldGaussian::new(vec![0.3; d], vec![0.5; d]).unwrap();
        let model = ModelSpec::new(arch, Likelihood::Normal { scale: 1.0 }).unwrap();
        let post = VariationalPosterior::mean_field(q);
        let thetas = post.sample_iid(&mut seeded_rng(6), 40);
        let draws = PredictiveDraws::new(&model, &thetas, &[1.5]).unwrap();
        let grid = Grid1D::with_max_step(-60.0, 60.0, 0.1).unwrap();
        let fast = draws.log_density_on_grid(0, &grid);
        for (k, &y) in grid.points().iter().enumerate().step_by(37) {
            let terms: Vec<f64> = thetas
                .iter()
                .map(|t| {
                    let out = mlp_predict(t, &model.arch, &Array2::from_elem((1, 1), 1.5)).unwrap();
                    normal_log_pdf(y, out[[0, 0]], 1.0)
                })
                .collect();
            let slow = log_sum_exp(&terms).unwrap() - (thetas.len() as f64).ln();
            let sorted = draws.sorted_means(0);
            assert_abs_diff_eq!(log_density_sorted(&sorted, 1.0, y), slow, epsilon = 1e-9 * slow.abs().max(1.0));
            assert_abs_diff_eq!(fast[k], slow, epsilon = 1e-9 * slow.abs().max(1.0));
        }
    }

    #[test]
    fn coverage_error_on_narrow_grid() {
        let truth = GenerativeTruth::Sinusoid { noise: 10.0 };
        let (g, lp) = truth_grid(&truth, X_LO).unwrap();
        let mass = g.integrate(&lp.iter().map(|l| l.exp()).collect::<Vec<_>>());
        assert!(mass >= GRID_COVERAGE);
        let err = truth_grid_with(&truth, X_HI, 3.0).unwrap_err();
        assert!(matches!(err, crate::error::CliError::Core(Error::GridCoverage { .. })));
    }

    #[test]
    fn probe_masses_for_collapsed_bimodal_model() {
        let truth = GenerativeTruth::Rademacher { scale: 1.0 };
        let x = 2.0 * std::f64::consts::PI / 3.0;
        let mu = sinusoid_mean(x);
        let (model, post) = linear(0.0, mu, Likelihood::Normal { scale: 1.0 });
        let (stats, curves) =
            probe_report(&model, &post, &truth, &[x], 3, &mut seeded_rng(7)).unwrap();
        let s = &stats[0];
        let n = Normal1D::standard();
        assert_abs_diff_eq!(s.mass_near_plus, n.cdf(2.0) - n.cdf(-2.0), epsilon = 1e-9);
        assert!(s.mass_near_minus < 1e-9);
        assert_abs_diff_eq!(s.predictive_mean, mu, epsilon = 1e-9);
        assert_abs_diff_eq!(s.predictive_std, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.truth_std, (1.0 + mu * mu).sqrt(), epsilon = 1e-9);
        assert_eq!(curves[0].y.len(), curves[0].predictive.len());
    }
}
