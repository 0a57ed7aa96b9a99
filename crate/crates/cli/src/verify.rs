//! Numerical falsification suite behind the `verify` subcommand.

use pacm_core::distributions::MeanFieldGaussian;
use pacm_core::models::VariationalPosterior;
use pacm_core::theory_checks::{
    check_inequality_lemmas, check_lambda_star, check_monotone_chain, CheckReport, LocationModel,
    RegressionLikelihood,
};

use crate::config::{Experiment, ToyTruth};
use crate::data::{sample_dataset, stream_rng, GenerativeTruth, Stream};
use crate::error::CliResult;
use crate::train::model_for;

pub const CHAIN_M: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const LAMBDA_N: [usize; 2] = [10, 100];
pub const LAMBDA_BETA: [f64; 3] = [0.5, 1.0, 2.0];
pub const LAMBDA_M: [usize; 4] = [2, 4, 16, 64];

/// Chain check on the toy location model with a `N(0, 3)` parameter distribution.
pub fn chain_location(replicates: usize, seed: u64) -> CliResult<CheckReport> {
    let data = sample_dataset(&GenerativeTruth::toy(ToyTruth::Narrow), 5, seed).y;
    let lik = LocationModel { data, scale: 1.0 };
    let post = VariationalPosterior::mean_field(MeanFieldGaussian::new(vec![0.0], vec![3f64.ln()])?);
    let mut rng = stream_rng(seed, Stream::Solver);
    let (mut report, _) = check_monotone_chain(&post, &lik, &CHAIN_M, replicates, &mut rng)?;
    report.name = "monotone_chain_location".into();
    Ok(report)
}

/// Chain check on the sinusoid network with a broad mean-field posterior.
pub fn chain_regression(replicates: usize, seed: u64) -> CliResult<CheckReport> {
    let model = model_for(Experiment::Sinusoid)?;
    let data = sample_dataset(&GenerativeTruth::Sinusoid { noise: 10.0 }, 50, seed);
    let (x, y) = (data.x_column(), data.y.clone());
    let lik = RegressionLikelihood {
        model: &model,
        x: &x,
        y: &y,
    };
    let d = model.arch.param_count();
    let post = VariationalPosterior::mean_field(MeanFieldGaussian::new(vec![0.1; d], vec![0.5f64.ln(); d])?);
    let mut rng = stream_rng(seed, Stream::Eval);
    let (mut report, _) = check_monotone_chain(&post, &lik, &CHAIN_M, replicates, &mut rng)?;
    report.name = "monotone_chain_regression".into();
    Ok(report)
}

pub fn lemma_suite(trials: usize, seed: u64) -> CliResult<Vec<CheckReport>> {
    Ok(check_inequality_lemmas(&mut stream_rng(seed, Stream::Data), trials)?)
}

pub fn lambda_star_grid() -> CliResult<Vec<CheckReport>> {
    let mut out = Vec::new();
    for n in LAMBDA_N {
        for beta in LAMBDA_BETA {
            out.push(check_lambda_star(n, beta, &LAMBDA_M)?);
        }
    }
    Ok(out)
}

/// Every check, in a fixed order.
pub fn run_verify(trials: usize, seed: u64) -> CliResult<Vec<CheckReport>> {
    let mut reports = vec![
        chain_location(trials.max(1000), seed)?,
        chain_regression(trials.clamp(100, 1000), seed)?,
    ];
    reports.extend(lemma_suite(trials, seed)?);
    reports.extend(lambda_star_grid()?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let reports = run_verify(200, 4).unwrap();
        assert_eq!(reports.len(), 2 + 7 + 6);
        for r in &reports {
            assert!(r.passed, "{r:?}");
            assert!(r.trials > 0);
        }
    }

    #[test]
    fn lemma_suite_rejects_few_trials() {
        assert!(lemma_suite(10, 0).is_err());
    }
}
