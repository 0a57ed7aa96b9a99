//! Scalar risk functionals.
//!
//! Every multisample loss consumes a [`LogLikMatrix`] whose entry `[j][i]` is
//! `log p(x_i | θ_j)` for posterior draw `j` and datum `i`. The KL term is
//! passed in separately so the same functions serve the training-time Monte
//! Carlo estimate and closed-form toy studies.
//!
//! With the default `λ_m = β n m` the PAC^m KL coefficient `m / λ_m` reduces
//! to `1 / (β n)`, and the loss is evaluated with exactly the same floating
//! point expression as the ELBO so that `m = 1` collapses bit-for-bit.

use crate::distributions::{
    normal_log_pdf, LogDensity1D, MixtureNormal1D, Normal1D, ParamDistribution, Sample1D,
};
use crate::error::{usage, Error, Result};
use crate::numerics::{lme_unchecked, lse_unchecked, mean_and_se, Grid1D};
use crate::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// `m × n` matrix of log-likelihood values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikMatrix {
    values: Vec<f64>,
    m: usize,
    n: usize,
}

impl LogLikMatrix {
    pub fn new(m: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        if m == 0 || n == 0 {
            return usage("log-likelihood matrix needs m >= 1 and n >= 1");
        }
        if values.len() != m * n {
            return Err(Error::DimensionMismatch {
                expected: m * n,
                got: values.len(),
            });
        }
        if values.iter().any(|v| v.is_nan()) {
            return usage("log-likelihood matrix contains NaN");
        }
        Ok(Self { values, m, n })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return usage("ragged log-likelihood rows");
        }
        Self::new(m, n, rows.concat())
    }

    /// Builds the matrix by evaluating `log_lik(j, i)`.
    pub fn from_fn(m: usize, n: usize, mut log_lik: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(m * n);
        for j in 0..m {
            for i in 0..n {
                values.push(log_lik(j, i));
            }
        }
        Self::new(m, n, values)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.m).map(|j| self.get(j, i)).collect()
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.iter().any(|r| *r >= self.m) {
            return usage("row index out of range");
        }
        let values = rows.iter().flat_map(|r| self.row(*r).to_vec()).collect();
        Self::new(rows.len(), self.n, values)
    }
}

/// How `λ_m` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    /// `λ_m = β n m`, giving the KL coefficient `1 / (β n)`.
    BetaNm,
    /// `λ* = n β sqrt(log max(2, m))`.
    LambdaStar,
    Explicit(f64),
}

/// Bound parameters shared by the losses and the ψ machinery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub n: usize,
    pub m: usize,
    pub beta: f64,
    pub lambda: f64,
    pub lambda_mode: LambdaMode,
    pub xi: f64,
    pub s: f64,
    /// Permits `λ < m` in the non-default modes.
    pub allow_small_lambda: bool,
}

impl BoundParams {
    /// Defaults: `λ = β n m`, `ξ = 1`, `s = √2 / β`.
    pub fn new(n: usize, m: usize, beta: f64) -> Result<Self> {
        if n == 0 || m == 0 {
            return usage("bound parameters need n >= 1 and m >= 1");
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return usage(format!("beta must be positive, got {beta}"));
        }
        Ok(Self {
            n,
            m,
            beta,
            lambda: beta * n as f64 * m as f64,
            lambda_mode: LambdaMode::BetaNm,
            xi: 1.0,
            s: std::f64::consts::SQRT_2 / beta,
            allow_small_lambda: false,
        })
    }

    pub fn with_lambda_mode(mut self, mode: LambdaMode) -> Result<Self> {
        let lambda = match mode {
            LambdaMode::BetaNm => self.beta * self.n as f64 * self.m as f64,
            LambdaMode::LambdaStar => lambda_star(self.n, self.beta, self.m),
            LambdaMode::Explicit(l) => l,
        };
        if !(lambda > 0.0 && lambda.is_finite()) {
            return usage(format!("lambda must be positive, got {lambda}"));
        }
        self.lambda = lambda;
        self.lambda_mode = mode;
        Ok(self)
    }

    pub fn with_lambda(self, lambda: f64) -> Result<Self> {
        self.with_lambda_mode(LambdaMode::Explicit(lambda))
    }

    pub fn with_xi(mut self, xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi <= 1.0) {
            return usage(format!("xi must lie in (0, 1], got {xi}"));
        }
        self.xi = xi;
        Ok(self)
    }

    pub fn with_s(mut self, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return usage(format!("s must be positive, got {s}"));
        }
        self.s = s;
        Ok(self)
    }

    pub fn allowing_small_lambda(mut self) -> Self {
        self.allow_small_lambda = true;
        self
    }

    /// Whether `λ_m ≥ m`, the assumption behind the bound chain.
    pub fn satisfies_lambda_assumption(&self) -> bool {
        self.lambda >= self.m as f64
    }

    /// Non-fatal diagnostics about the parameter choice.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.lambda_mode == LambdaMode::BetaNm && !self.satisfies_lambda_assumption() {
            out.push(format!(
                "lambda = beta*n*m = {} is below m = {}; the monotone chain assumption does not hold",
                self.lambda, self.m
            ));
        }
        out
    }

    /// `m / λ_m` times `kl`, using `kl / (β n)` in the default mode.
    pub fn scaled_kl(&self, kl: f64) -> f64 {
        match self.lambda_mode {
            LambdaMode::BetaNm => kl / (self.beta * self.n as f64),
            _ => self.m as f64 / self.lambda * kl,
        }
    }

    fn check_lambda(&self) -> Result<()> {
        if self.lambda_mode != LambdaMode::BetaNm
            && !self.allow_small_lambda
            && !self.satisfies_lambda_assumption()
        {
            return usage(format!(
                "lambda = {} is below m = {}; pass the override to allow it",
                self.lambda, self.m
            ));
        }
        Ok(())
    }
}

fn check_kl(kl: f64) -> Result<()> {
    if !(kl >= 0.0) {
        return usage(format!("KL term must be non-negative, got {kl}"));
    }
    Ok(())
}

/// Monte Carlo empirical inferential risk `-(1/(mn)) Σ_{j,i} ll[j][i]`.
///
/// Averages each column over draws first, then over data, so that `m = 1`
/// shares its arithmetic with [`mc_pred_term`].
pub fn emp_inf_risk(ll: &LogLikMatrix) -> f64 {
    let m = ll.m as f64;
    let total: f64 = (0..ll.n)
        .map(|i| (0..ll.m).map(|j| ll.get(j, i)).sum::<f64>() / m)
        .sum();
    -total / ll.n as f64
}

/// PAC^m data term `-(1/n) Σ_i log_mean_exp_j ll[j][i]`.
pub fn mc_pred_term(ll: &LogLikMatrix) -> f64 {
    let total: f64 = (0..ll.n).map(|i| lme_unchecked(&ll.column(i))).sum();
    -total / ll.n as f64
}

/// ELBO: `emp_inf_risk + kl / (β n)`.
pub fn elbo_loss(ll: &LogLikMatrix, kl: f64, params: &BoundParams) -> Result<f64> {
    check_kl(kl)?;
    Ok(emp_inf_risk(ll) + kl / (params.beta * params.n as f64))
}

/// PAC^m: `mc_pred_term + (m / λ_m) kl`.
pub fn pacm_loss(ll: &LogLikMatrix, kl: f64, params: &BoundParams) -> Result<f64> {
    check_kl(kl)?;
    params.check_lambda()?;
    Ok(mc_pred_term(ll) + params.scaled_kl(kl))
}

/// Second-order variance correction of PAC2-T: per-column max-centering
/// with an additive smoothing constant, `h` weights, then `mean(var1 - var2)`.
pub fn pac2t_variance_term(ll: &LogLikMatrix, smoothing: f64) -> Result<f64> {
    if !(smoothing > 0.0) {
        return usage(format!("smoothing constant must be positive, got {smoothing}"));
    }
    let (m, n) = (ll.m, ll.n);
    if m == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        let col = ll.column(i);
        let lmx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) + smoothing;
        let centered: Vec<f64> = col.iter().map(|v| v - lmx).collect();
        let al = lme_unchecked(&centered);
        let ea = al.exp();
        let h = 2.0 * (al / (1.0 - ea).powi(2) + 1.0 / (ea * (1.0 - ea)));
        for b in 0..m {
            let var1 = h * (2.0 * centered[b]).exp();
            let var2 = (0..m)
                .map(|a| h * (centered[b] + centered[a]).exp())
                .sum::<f64>()
                / m as f64;
            total += var1 - var2;
        }
    }
    Ok(total / (m * n) as f64)
}

/// PAC2-T: `elbo_loss - variance_term`.
pub fn pac2t_loss(
    ll: &LogLikMatrix,
    kl: f64,
    params: &BoundParams,
    smoothing: f64,
) -> Result<f64> {
    let variance = pac2t_variance_term(ll, smoothing)?;
    Ok(elbo_loss(ll, kl, params)? - variance)
}

/// IWAE: `-(1/n) Σ_i log_mean_exp_j (ll[j][i] + log_weight[j][i])` with
/// `log_weight = log r(θ_j) - log q(θ_j)`.
pub fn iwae_loss(ll: &LogLikMatrix, log_weight: &LogLikMatrix) -> Result<f64> {
    if ll.m != log_weight.m || ll.n != log_weight.n {
        return Err(Error::DimensionMismatch {
            expected: ll.m * ll.n,
            got: log_weight.m * log_weight.n,
        });
    }
    let total: f64 = (0..ll.n)
        .map(|i| {
            let col: Vec<f64> = (0..ll.m)
                .map(|j| ll.get(j, i) + log_weight.get(j, i))
                .collect();
            lme_unchecked(&col)
        })
        .sum();
    Ok(-total / ll.n as f64)
}

/// Empirical-minus-true m-sample log-likelihood gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub delta: f64,
    pub empirical_term: f64,
    pub true_term: f64,
}

pub fn delta_gap(empirical_term: f64, true_term: f64) -> Result<GapStats> {
    if !(empirical_term.is_finite() && true_term.is_finite()) {
        return usage("gap terms must be finite");
    }
    Ok(GapStats {
        delta: empirical_term - true_term,
        empirical_term,
        true_term,
    })
}

/// Δ(X^n, Θ^m) for the toy model `p(x|θ) = Normal(x; θ, model_scale)`,
/// with the ν-expectation by quadrature on `x_grid`.
pub fn toy_gap(
    data: &[f64],
    thetas: &[f64],
    nu: &MixtureNormal1D,
    model_scale: f64,
    x_grid: &Grid1D,
) -> Result<GapStats> {
    if data.is_empty() || thetas.is_empty() {
        return usage("toy gap needs data and parameter draws");
    }
    let log_g = |x: f64| {
        let v: Vec<f64> = thetas.iter().map(|t| normal_log_pdf(x, *t, model_scale)).collect();
        lme_unchecked(&v)
    };
    let empirical = data.iter().map(|x| log_g(*x)).sum::<f64>() / data.len() as f64;
    let truth = x_grid.integrate_fn(|x| nu.pdf(x) * log_g(x));
    delta_gap(empirical, truth)
}

/// Monte Carlo estimate of ψ with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub trials: usize,
    /// Mean of the sampled gaps; zero in expectation.
    pub mean_delta: f64,
}

/// Quadrature grid covering ν with a wide margin.
pub fn covering_grid(nu: &MixtureNormal1D, width_in_scales: f64, max_step: f64) -> Result<Grid1D> {
    let smax = nu.scales().iter().copied().fold(0.0, f64::max);
    let lo = nu.locs().iter().copied().fold(f64::INFINITY, f64::min) - width_in_scales * smax;
    let hi = nu.locs().iter().copied().fold(f64::NEG_INFINITY, f64::max) + width_in_scales * smax;
    Grid1D::with_max_step(lo, hi, max_step)
}

/// `ψ ≈ (1/λ) log mean_t exp(λ Δ_t) - (1/λ) log ξ` over fresh
/// `(X^n ~ ν, Θ^m ~ prior)` draws. The average is accumulated in log space.
pub fn psi_mc(
    nu: &MixtureNormal1D,
    prior: &Normal1D,
    model_scale: f64,
    params: &BoundParams,
    trials: usize,
    rng: &mut Rng,
) -> Result<PsiEstimate> {
    if trials == 0 {
        return usage("psi_mc needs at least one trial");
    }
    let grid = covering_grid(nu, 12.0, 0.05)?;
    let lambda = params.lambda;
    let mut scaled = Vec::with_capacity(trials);
    let mut deltas = Vec::with_capacity(trials);
    for _ in 0..trials {
        let data = nu.sample(rng, params.n);
        let thetas = prior.sample(rng, params.m);
        let gap = toy_gap(&data, &thetas, nu, model_scale, &grid)?;
        deltas.push(gap.delta);
        scaled.push(lambda * gap.delta);
    }
    let log_mean = lse_unchecked(&scaled) - (trials as f64).ln();
    let estimate = log_mean / lambda - params.xi.ln() / lambda;

    // delta-method standard error of log(mean w), with w = exp(λΔ) shifted
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|a| (a - max).exp()).collect();
    let (wbar, wse) = mean_and_se(&w);
    let std_error = if wbar > 0.0 { wse / wbar / lambda } else { f64::INFINITY };
    let (mean_delta, _) = mean_and_se(&deltas);
    Ok(PsiEstimate {
        estimate,
        std_error,
        trials,
        mean_delta,
    })
}

/// `λ* = n β sqrt(log max(2, m))`.
pub fn lambda_star(n: usize, beta: f64, m: usize) -> f64 {
    n as f64 * beta * (m.max(2) as f64).ln().sqrt()
}

/// Closed-form upper bound on ψ: `λs²/(2n) + (n log m)/λ + log m - (1/λ) log ξ`.
pub fn psi_upper_bound(lambda: f64, s: f64, n: usize, m: usize, xi: f64) -> f64 {
    let n = n as f64;
    let log_m = (m as f64).ln();
    lambda * s * s / (2.0 * n) + n * log_m / lambda + log_m - xi.ln() / lambda
}

/// True inferential and predictive risks of a toy-model parameter distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueRisks {
    pub true_inf: f64,
    pub true_pred: f64,
}

/// Required ν mass inside the quadrature grid.
pub const TOY_COVERAGE: f64 = 1.0 - 1e-10;

fn check_coverage(nu: &MixtureNormal1D, x_grid: &Grid1D) -> Result<()> {
    let captured = nu.mass_between(x_grid.lo(), x_grid.hi());
    if captured < TOY_COVERAGE {
        return Err(Error::GridCoverage {
            captured,
            required: TOY_COVERAGE,
        });
    }
    Ok(())
}

/// `-E_ν E_q[log p(X|Θ)]` and `-E_ν[log E_q p(X|Θ)]` by quadrature over `x_grid`.
pub fn true_risks_toy<Q: ParamDistribution + ?Sized>(
    q: &Q,
    nu: &MixtureNormal1D,
    model_scale: f64,
    x_grid: &Grid1D,
) -> Result<TrueRisks> {
    check_coverage(nu, x_grid)?;
    let mut inf = 0.0;
    let mut pred = 0.0;
    for x in x_grid.points() {
        let w = nu.pdf(x);
        if w == 0.0 {
            continue;
        }
        inf -= w * q.expected_log_lik(model_scale, x);
        pred -= w * q.log_predictive_density(model_scale, x);
    }
    let step = x_grid.step();
    Ok(TrueRisks {
        true_inf: inf * step,
        true_pred: pred * step,
    })
}

/// Differential entropy of ν by quadrature.
pub fn entropy_toy(nu: &MixtureNormal1D, x_grid: &Grid1D) -> Result<f64> {
    check_coverage(nu, x_grid)?;
    Ok(-x_grid.integrate_fn(|x| {
        let l = nu.log_prob(x);
        if l == f64::NEG_INFINITY {
            0.0
        } else {
            l.exp() * l
        }
    }))
}

/// `KL[ν ‖ E_q p(X|Θ)]` in nats: true predictive risk minus the entropy of ν.
pub fn kl_nu_to_predictive<Q: ParamDistribution + ?Sized>(
    q: &Q,
    nu: &MixtureNormal1D,
    model_scale: f64,
    x_grid: &Grid1D,
) -> Result<f64> {
    check_coverage(nu, x_grid)?;
    Ok(x_grid.integrate_fn(|x| {
        let l = nu.log_prob(x);
        if l == f64::NEG_INFINITY {
            0.0
        } else {
            l.exp() * (l - q.log_predictive_density(model_scale, x))
        }
    }))
}

/// Exact (m → ∞) empirical risks of a toy parameter distribution on data:
/// `(emp_inf, emp_pred)`.
pub fn empirical_risks_toy<Q: ParamDistribution + ?Sized>(
    q: &Q,
    data: &[f64],
    model_scale: f64,
) -> (f64, f64) {
    let n = data.len() as f64;
    let inf = -data.iter().map(|x| q.expected_log_lik(model_scale, *x)).sum::<f64>() / n;
    let pred = -data
        .iter()
        .map(|x| q.log_predictive_density(model_scale, *x))
        .sum::<f64>()
        / n;
    (inf, pred)
}

/// Named scalar risks in nats, with the loss decomposition and run metadata.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RiskReport {
    pub name: String,
    pub values: BTreeMap<String, f64>,
    pub data_term: Option<f64>,
    pub kl_term: Option<f64>,
    pub seed: Option<u64>,
    pub m: Option<usize>,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
}

impl RiskReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn with_value(mut self, key: impl Into<String>, nats: f64) -> Self {
        self.values.insert(key.into(), nats);
        self
    }

    /// Same values converted to bits.
    pub fn values_in_bits(&self) -> BTreeMap<String, f64> {
        self.values
            .iter()
            .map(|(k, v)| (k.clone(), crate::nats_to_bits(*v)))
            .collect()
    }
}
