//! Numerical falsification harnesses for the bound chain, the ψ bound and
//! the supporting inequalities. Each check returns a serializable
//! [`CheckReport`]; statistical checks gate at three standard errors.

use crate::distributions::{normal_log_pdf, MeanFieldGaussian, MixtureNormal1D, Normal1D};
use crate::error::{usage, Result};
use crate::models::{log_lik_values, ModelSpec, VariationalPosterior};
use crate::numerics::{log_avg_exp_tempered, lme_unchecked, mean_and_se};
use crate::objectives::{
    elbo_loss, lambda_star, mc_pred_term, pacm_loss, psi_mc, psi_upper_bound, BoundParams,
    LogLikMatrix,
};
use crate::Rng;
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Smallest observed margin by which the checked inequality held
    /// (negative when violated, after tolerance).
    pub worst_slack: f64,
    pub tolerance: String,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, tolerance: &str) -> Self {
        Self {
            name: name.to_string(),
            trials: 0,
            violations: 0,
            worst_slack: f64::INFINITY,
            tolerance: tolerance.to_string(),
            passed: true,
        }
    }

    /// Records one trial whose inequality margin is `slack`; negative is a violation.
    fn record(&mut self, slack: f64) {
        self.trials += 1;
        self.worst_slack = self.worst_slack.min(slack);
        if !(slack >= 0.0) {
            self.violations += 1;
        }
        self.passed = self.violations == 0;
    }

    fn merge(&mut self, other: CheckReport) {
        self.trials += other.trials;
        self.violations += other.violations;
        self.worst_slack = self.worst_slack.min(other.worst_slack);
        self.passed = self.violations == 0;
    }
}

/// Per-datum log-likelihood of a parameter vector.
pub trait PointLikelihood {
    fn n(&self) -> usize;
    fn log_lik_row(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `x_i ~ N(θ, scale)` with a scalar location θ.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationModel {
    pub data: Vec<f64>,
    pub scale: f64,
}

impl PointLikelihood for LocationModel {
    fn n(&self) -> usize {
        self.data.len()
    }

    fn log_lik_row(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != 1 {
            return usage("location model takes a single parameter");
        }
        Ok(self
            .data
            .iter()
            .map(|x| normal_log_pdf(*x, theta[0], self.scale))
            .collect())
    }
}

/// Regression network likelihood on fixed inputs and targets.
#[derive(Debug, Clone)]
pub struct RegressionLikelihood<'a> {
    pub model: &'a ModelSpec,
    pub x: &'a Array2<f64>,
    pub y: &'a [f64],
}

impl PointLikelihood for RegressionLikelihood<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn log_lik_row(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let ll = log_lik_values(self.model, &[theta.to_vec()], self.x, self.y)?;
        Ok(ll.iter().copied().collect())
    }
}

fn log_lik_matrix(lik: &dyn PointLikelihood, thetas: &[Vec<f64>]) -> Result<LogLikMatrix> {
    let rows = thetas
        .iter()
        .map(|t| lik.log_lik_row(t))
        .collect::<Result<Vec<_>>>()?;
    LogLikMatrix::from_rows(&rows)
}

/// Data-term estimate at one `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainPoint {
    pub m: usize,
    pub mean: f64,
    pub std_error: f64,
}

/// Checks that the q-expected multisample data term does not increase with `m`.
///
/// Each entry of `m_list` is estimated from `replicates` independent
/// m-tuples; consecutive entries must be ordered within three pooled
/// standard errors. The report also covers bit-equality of the PAC^m and
/// ELBO losses at `m = 1` and the exhaustive leave-one-out argument at
/// `m = 2, 3`.
pub fn check_monotone_chain(
    post: &VariationalPosterior,
    lik: &dyn PointLikelihood,
    m_list: &[usize],
    replicates: usize,
    rng: &mut Rng,
) -> Result<(CheckReport, Vec<ChainPoint>)> {
    if m_list.first() != Some(&1) || m_list.windows(2).any(|w| w[1] <= w[0]) {
        return usage("m_list must be ascending and start at 1");
    }
    if replicates < 2 {
        return usage("need at least two replicates");
    }
    let mut report = CheckReport::new("monotone_chain", "3 pooled SE; m=1 bitwise; leave-one-out 1e-12");
    let mut points = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let mut terms = Vec::with_capacity(replicates);
        for _ in 0..replicates {
            let thetas = post.sample_iid(rng, m);
            terms.push(mc_pred_term(&log_lik_matrix(lik, &thetas)?));
        }
        let (mean, std_error) = mean_and_se(&terms);
        points.push(ChainPoint { m, mean, std_error });
    }
    for w in points.windows(2) {
        let pooled = w[0].std_error.hypot(w[1].std_error);
        report.record(w[0].mean - w[1].mean + 3.0 * pooled);
    }

    // m = 1 collapse on a shared draw
    let n = lik.n();
    for _ in 0..replicates.min(100) {
        let ll = log_lik_matrix(lik, &post.sample_iid(rng, 1))?;
        let kl: f64 = rng.random_range(0.0..10.0);
        let beta: f64 = rng.random_range(0.1..4.0);
        let params = BoundParams::new(n, 1, beta)?;
        let same = pacm_loss(&ll, kl, &params)?.to_bits() == elbo_loss(&ll, kl, &params)?.to_bits();
        report.record(if same { 0.0 } else { -1.0 });
    }

    for m in [2, 3] {
        report.merge(check_leave_one_out(post, lik, m, replicates.min(500), rng)?);
    }
    report.name = "monotone_chain".into();
    Ok((report, points))
}

/// For each of `replicates` m-tuples: the m-sample likelihood average equals
/// the average of its leave-one-out averages (relative 1e-12), and the
/// m-sample data term is at most the mean of the leave-one-out data terms.
pub fn check_leave_one_out(
    post: &VariationalPosterior,
    lik: &dyn PointLikelihood,
    m: usize,
    replicates: usize,
    rng: &mut Rng,
) -> Result<CheckReport> {
    if m < 2 {
        return usage("leave-one-out needs m >= 2");
    }
    let mut report = CheckReport::new(&format!("leave_one_out_m{m}"), "1e-12");
    for _ in 0..replicates {
        let thetas = post.sample_iid(rng, m);
        let ll = log_lik_matrix(lik, &thetas)?;
        let subsets: Vec<LogLikMatrix> = (0..m)
            .map(|drop| {
                let keep: Vec<usize> = (0..m).filter(|j| *j != drop).collect();
                ll.select_rows(&keep)
            })
            .collect::<Result<_>>()?;

        // identity on the linear-scale averages, per datum
        let mut worst: f64 = f64::INFINITY;
        for i in 0..ll.n() {
            let full = lme_unchecked(&ll.column(i));
            let loo: Vec<f64> = subsets.iter().map(|s| lme_unchecked(&s.column(i))).collect();
            let avg_of_loo = lme_unchecked(&loo);
            worst = worst.min(1e-12 * (1.0 + full.abs()) - (full - avg_of_loo).abs());
        }
        report.record(worst);

        let loo_mean = subsets.iter().map(mc_pred_term).sum::<f64>() / m as f64;
        let full = mc_pred_term(&ll);
        report.record(loo_mean - full + 1e-12 * (1.0 + full.abs()));
    }
    Ok(report)
}

fn random_simplex(rng: &mut Rng, k: usize, allow_zeros: bool) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k)
        .map(|_| {
            if allow_zeros && rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.01..1.0)
            }
        })
        .collect();
    if w.iter().all(|v| *v == 0.0) {
        w[0] = 1.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

fn discrete_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Compression: `E_p f ≤ KL(p ‖ r) + log E_r e^f` on random discrete instances.
pub fn check_compression(rng: &mut Rng, trials: usize) -> CheckReport {
    let mut report = CheckReport::new("compression", "1e-12");
    for t in 0..trials {
        let k = rng.random_range(1..=6);
        let r = random_simplex(rng, k, false);
        let (p, f) = if t == 0 {
            (r.clone(), vec![0.0; k])
        } else {
            let p = random_simplex(rng, k, true);
            let f: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            (p, f)
        };
        let lhs: f64 = p.iter().zip(&f).map(|(a, b)| a * b).sum();
        let mgf: f64 = r.iter().zip(&f).map(|(a, b)| a * b.exp()).sum();
        let rhs = discrete_kl(&p, &r) + mgf.ln();
        report.record(rhs - lhs + 1e-12);
    }
    report
}

/// Gibbs: `KL(p ‖ q) ≥ 0` for random discrete pairs, exactly zero when equal.
pub fn check_gibbs(rng: &mut Rng, trials: usize) -> CheckReport {
    let mut report = CheckReport::new("gibbs", "1e-12");
    for t in 0..trials {
        let k = rng.random_range(1..=6);
        let q = random_simplex(rng, k, false);
        let p = if t % 10 == 0 { q.clone() } else { random_simplex(rng, k, true) };
        let kl = discrete_kl(&p, &q);
        if p == q {
            report.record(if kl == 0.0 { 0.0 } else { -kl.abs() });
        } else {
            report.record(kl + 1e-12);
        }
    }
    report
}

/// Log-Markov: `P(log Z ≤ log E Z - log ξ) ≥ 1 - ξ`, by empirical coverage
/// over `draws` samples per trial, gated at three binomial standard errors.
pub fn check_log_markov(rng: &mut Rng, trials: usize, draws: usize) -> CheckReport {
    let mut report = CheckReport::new("log_markov", "3 binomial SE");
    for t in 0..trials {
        let xi: f64 = rng.random_range(0.01..=1.0);
        let (samples, mean): (Vec<f64>, f64) = if t % 2 == 0 {
            let rate = rng.random_range(0.2..5.0);
            let d = Exp::new(rate).expect("rate");
            ((0..draws).map(|_| d.sample(rng)).collect(), 1.0 / rate)
        } else {
            let (mu, sigma) = (rng.random_range(-2.0..2.0), rng.random_range(0.1..2.0));
            let d = LogNormal::new(mu, sigma).expect("lognormal");
            (
                (0..draws).map(|_| d.sample(rng)).collect(),
                (mu + sigma * sigma / 2.0f64).exp(),
            )
        };
        let threshold = mean.ln() - xi.ln();
        let covered = samples.iter().filter(|z| z.ln() <= threshold).count() as f64 / draws as f64;
        let target = 1.0 - xi;
        let se = (xi * (1.0 - xi) / draws as f64).sqrt();
        report.record(covered - target + 3.0 * se);
    }
    report
}

/// KL of an m-fold product equals m times the single KL, comparing the
/// coordinate-wise KL of the duplicated Gaussians with the scaled one.
pub fn check_kl_iid(rng: &mut Rng, trials: usize) -> CheckReport {
    let mut report = CheckReport::new("kl_iid", "1e-12 relative");
    for _ in 0..trials {
        let d = rng.random_range(1..6);
        let m = rng.random_range(1..9);
        let gen = |rng: &mut Rng| {
            MeanFieldGaussian::new(
                (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                (0..d).map(|_| rng.random_range(-2.0..1.0)).collect(),
            )
            .expect("valid gaussian")
        };
        let (q, r) = (gen(rng), gen(rng));
        let single = q.kl(&r).expect("same dim");
        let product = q.iid_power(m).kl(&r.iid_power(m)).expect("same dim");
        let scaled = m as f64 * single;
        report.record(1e-12 * (1.0 + scaled.abs()) - (product - scaled).abs());
    }
    report
}

/// ψ with `ξ = 1` is non-negative, checked on several toy configurations
/// with `trials` Monte Carlo draws each; gate at three standard errors.
pub fn check_psi_nonneg(rng: &mut Rng, trials: usize) -> Result<CheckReport> {
    let mut report = CheckReport::new("psi_nonneg", "-3 SE");
    let nu = MixtureNormal1D::new(vec![0.3, 0.7], vec![-2.0, 2.0], vec![1.0, 1.0])?;
    let prior = Normal1D::new(0.0, 3.0)?;
    let configs = [(5, 1, 1.0), (5, 2, 1.0), (10, 4, 0.5), (3, 2, 2.0)];
    let mut worst: f64 = f64::INFINITY;
    let mut failed = 0;
    for (n, m, lambda) in configs {
        let params = BoundParams::new(n, m, 1.0)?
            .with_lambda(lambda)?
            .allowing_small_lambda();
        let est = psi_mc(&nu, &prior, 1.0, &params, trials, rng)?;
        let slack = est.estimate + 3.0 * est.std_error;
        worst = worst.min(slack);
        if !(slack >= 0.0) {
            failed += 1;
        }
    }
    report.trials = configs.len() * trials;
    report.violations = failed;
    report.worst_slack = worst;
    report.passed = failed == 0;
    Ok(report)
}

fn random_vector(rng: &mut Rng) -> Vec<f64> {
    let len = rng.random_range(1..20);
    let spread = [0.1, 1.0, 10.0, 300.0][rng.random_range(0..4)];
    (0..len).map(|_| rng.random_range(-spread..spread)).collect()
}

/// `-lme(x) ≤ -(1/φ) lme(φ x)` for φ ∈ (0, 1], and `≤ -mean(x)` at φ = 0.
pub fn check_log_avg_exp_parametric(rng: &mut Rng, trials: usize) -> CheckReport {
    let mut report = CheckReport::new("log_avg_exp_parametric", "1e-12");
    for _ in 0..trials {
        let x = random_vector(rng);
        let lhs = -lme_unchecked(&x);
        let scale = 1.0 + x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let mut worst = f64::INFINITY;
        for phi in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let rhs = -log_avg_exp_tempered(&x, phi).expect("phi in range");
            worst = worst.min(rhs - lhs + 1e-12 * scale);
        }
        report.record(worst);
    }
    report
}

/// `max(mean, max - log n) ≤ lme(x) ≤ max`.
pub fn check_log_avg_exp_simple(rng: &mut Rng, trials: usize) -> CheckReport {
    let mut report = CheckReport::new("log_avg_exp_simple", "1e-12");
    for _ in 0..trials {
        let x = random_vector(rng);
        let n = x.len() as f64;
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = x.iter().sum::<f64>() / n;
        let v = lme_unchecked(&x);
        let tol = 1e-12 * (1.0 + max.abs());
        let lower = mean.max(max - n.ln());
        report.record((v - lower + tol).min(max - v + tol));
    }
    report
}

/// Runs every inequality check with `trials` instances each.
pub fn check_inequality_lemmas(rng: &mut Rng, trials: usize) -> Result<Vec<CheckReport>> {
    if trials < 100 {
        return usage("lemma checks need at least 100 trials");
    }
    Ok(vec![
        check_compression(rng, trials),
        check_log_markov(rng, trials, 1000),
        check_kl_iid(rng, trials),
        check_gibbs(rng, trials),
        check_psi_nonneg(rng, trials)?,
        check_log_avg_exp_parametric(rng, trials),
        check_log_avg_exp_simple(rng, trials),
    ])
}

/// Number of λ values in the ψ-bound scan.
pub const LAMBDA_SCAN_POINTS: usize = 10_000;

/// Scans the ψ upper bound over log-spaced λ around λ* for each `m`, checking
/// that the minimum sits within one grid cell of λ* (for `m > 1`) and that
/// the scanned curve is convex (slopes non-decreasing).
pub fn check_lambda_star(n: usize, beta: f64, m_list: &[usize]) -> Result<CheckReport> {
    if n == 0 || !(beta > 0.0) || m_list.is_empty() || m_list.contains(&0) {
        return usage("lambda scan needs n >= 1, beta > 0 and positive m values");
    }
    let mut report = CheckReport::new(
        &format!("lambda_star_n{n}_beta{beta}"),
        "one log-grid cell; slope decrease <= 1e-9 relative",
    );
    let s = std::f64::consts::SQRT_2 / beta;
    let cell = (1e4f64).ln() / (LAMBDA_SCAN_POINTS - 1) as f64;
    for &m in m_list {
        let target = lambda_star(n, beta, m);
        let lambdas: Vec<f64> = (0..LAMBDA_SCAN_POINTS)
            .map(|k| target * 1e-2 * (k as f64 * cell).exp())
            .collect();
        let values: Vec<f64> = lambdas
            .iter()
            .map(|l| psi_upper_bound(*l, s, n, m, 1.0))
            .collect();
        if m > 1 {
            let argmin = values
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("non-empty scan");
            let distance = (lambdas[argmin] / target).ln().abs();
            report.record(cell * (1.0 + 1e-9) - distance);
        }
        let slopes: Vec<f64> = values
            .windows(2)
            .zip(lambdas.windows(2))
            .map(|(v, l)| (v[1] - v[0]) / (l[1] - l[0]))
            .collect();
        let worst = slopes
            .windows(2)
            .map(|w| w[1] - w[0] + 1e-9 * w[0].abs().max(1.0))
            .fold(f64::INFINITY, f64::min);
        report.record(worst);
    }
    Ok(report)
}
