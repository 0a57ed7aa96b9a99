//! The unconditional toy study: six risk minimizers on five draws from ν.

use pacm_core::distributions::{MixtureNormal1D, Normal1D, ParamDistribution};
use pacm_core::objectives::{covering_grid, empirical_risks_toy, kl_nu_to_predictive, true_risks_toy};
use pacm_core::toy_solver::{
    atomic_erm, conjugate_posterior, fixed_point_pacpred, max_likelihood, toy_optima,
    AtomicErmConfig, FixedPointConfig,
};
use pacm_core::nats_to_bits;
use serde::{Deserialize, Serialize};

use crate::config::ToyTruth;
use crate::data::{sample_dataset, stream_rng, GenerativeTruth, Stream};
use crate::error::CliResult;

pub const TOY_N: usize = 5;
pub const MODEL_SCALE: f64 = 1.0;
pub const PRIOR_SCALE: f64 = 3.0;

/// Column order of the summary table.
pub const SOLVERS: [&str; 6] = ["emp-inf", "pac-inf", "true-inf", "emp-pred", "pac-pred", "true-pred"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRow {
    pub solver: String,
    pub true_inf_nats: f64,
    pub true_pred_nats: f64,
    pub emp_inf_nats: f64,
    pub emp_pred_nats: f64,
    pub kl_nats: f64,
    pub kl_bits: f64,
    /// `false` when an iterative solver hit its step cap.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStudy {
    pub seed: u64,
    pub truth: ToyTruth,
    pub data: Vec<f64>,
    pub rows: Vec<ToyRow>,
    pub fixed_point_iterations: usize,
    pub fixed_point_residual: f64,
    pub atomic_steps: usize,
}

impl ToyStudy {
    pub fn kl_bits(&self, solver: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.solver == solver).map(|r| r.kl_bits)
    }
}

fn row<Q: ParamDistribution + ?Sized>(
    solver: &str,
    q: &Q,
    nu: &MixtureNormal1D,
    data: &[f64],
    converged: bool,
) -> CliResult<ToyRow> {
    let grid = covering_grid(nu, 12.0, 0.01)?;
    let risks = true_risks_toy(q, nu, MODEL_SCALE, &grid)?;
    let (emp_inf, emp_pred) = empirical_risks_toy(q, data, MODEL_SCALE);
    let kl = kl_nu_to_predictive(q, nu, MODEL_SCALE, &grid)?;
    Ok(ToyRow {
        solver: solver.to_string(),
        true_inf_nats: risks.true_inf,
        true_pred_nats: risks.true_pred,
        emp_inf_nats: emp_inf,
        emp_pred_nats: emp_pred,
        kl_nats: kl,
        kl_bits: nats_to_bits(kl),
        converged,
    })
}

/// Draws `n = 5` points from the chosen ν and fits all six solvers.
pub fn toy_study(seed: u64, truth: ToyTruth) -> CliResult<ToyStudy> {
    let gen = GenerativeTruth::toy(truth);
    let GenerativeTruth::Toy(nu) = &gen else {
        unreachable!("toy truth")
    };
    let data = sample_dataset(&gen, TOY_N, seed).y;
    let prior = Normal1D::new(0.0, PRIOR_SCALE)?;

    let ml = max_likelihood(&data)?;
    let conj = conjugate_posterior(&prior, &data, MODEL_SCALE)?;
    let optima = toy_optima(nu, MODEL_SCALE)?;
    let atomic = atomic_erm(
        &data,
        MODEL_SCALE,
        &AtomicErmConfig::default(),
        &mut stream_rng(seed, Stream::Solver),
    )?;
    let fixed = fixed_point_pacpred(&prior, &data, MODEL_SCALE, &FixedPointConfig::default())?;

    let rows = vec![
        row(SOLVERS[0], &ml, nu, &data, true)?,
        row(SOLVERS[1], &conj, nu, &data, true)?,
        row(SOLVERS[2], &optima.inf_opt, nu, &data, true)?,
        row(SOLVERS[3], &atomic.posterior, nu, &data, atomic.converged)?,
        row(SOLVERS[4], &fixed.density, nu, &data, fixed.converged)?,
        row(SOLVERS[5], &optima.pred_opt, nu, &data, true)?,
    ];
    Ok(ToyStudy {
        seed,
        truth,
        data,
        rows,
        fixed_point_iterations: fixed.iterations,
        fixed_point_residual: fixed.residual,
        atomic_steps: atomic.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use pacm_core::distributions::normal_log_pdf;

    #[test]
    fn six_rows_in_table_order() {
        let s = toy_study(3, ToyTruth::Narrow).unwrap();
        let names: Vec<&str> = s.rows.iter().map(|r| r.solver.as_str()).collect();
        assert_eq!(names, SOLVERS);
        assert_eq!(s.data.len(), TOY_N);
        for r in &s.rows {
            assert!(r.kl_nats >= -1e-6, "{r:?}");
            assert_abs_diff_eq!(r.kl_bits, r.kl_nats / std::f64::consts::LN_2, epsilon = 1e-12);
            assert!(r.true_pred_nats <= r.true_inf_nats + 1e-9, "{r:?}");
        }
        assert_abs_diff_eq!(s.kl_bits("true-pred").unwrap(), 0.0, epsilon = 1e-6);
        assert!(s.fixed_point_residual < 1e-8);
    }

    #[test]
    fn ml_row_matches_direct_quadrature() {
        let s = toy_study(5, ToyTruth::Narrow).unwrap();
        let mean = s.data.iter().sum::<f64>() / 5.0;
        let nu = |x: f64| {
            0.3 * normal_log_pdf(x, -2.0, 1.0).exp() + 0.7 * normal_log_pdf(x, 2.0, 1.0).exp()
        };
        // Independent Simpson rule on [-16, 16].
        let k = 64_000;
        let h = 32.0 / k as f64;
        let mut kl = 0.0;
        for t in 0..=k {
            let x = -16.0 + h * t as f64;
            let w = if t == 0 || t == k { 1.0 } else if t % 2 == 1 { 4.0 } else { 2.0 };
            let p = nu(x);
            kl += w * p * (p.ln() - normal_log_pdf(x, mean, 1.0));
        }
        kl *= h / 3.0;
        assert_abs_diff_eq!(s.rows[0].kl_nats, kl, epsilon = 1e-7);
    }

    #[test]
    fn wide_truth_orders_inferential_above_predictive() {
        let s = toy_study(1, ToyTruth::Wide).unwrap();
        let inf = s.kl_bits("true-inf").unwrap();
        assert!(inf > 9.0 && inf < 11.0, "{inf}");
        for solver in ["emp-pred", "pac-pred"] {
            assert!(s.kl_bits(solver).unwrap() < inf);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(toy_study(8, ToyTruth::Narrow).unwrap(), toy_study(8, ToyTruth::Narrow).unwrap());
    }
}
