//! Training harness for the regression experiments.

use std::time::Instant;

use pacm_core::distributions::MeanFieldGaussian;
use pacm_core::models::{
    init_params, loss_and_grad, sample_noise, Activation, InitScheme, LearningRate, Likelihood,
    MlpArch, ModelSpec, Objective, OptimizerKind, OptimizerState, VariationalPosterior,
};
use pacm_core::numerics::mean_and_se;
use pacm_core::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, ExperimentConfig};
use crate::data::{evenly_spaced, gen_dataset, gen_test_dataset, stream_rng, Dataset, GenerativeTruth, Stream, X_HI, X_LO};
use crate::error::{CliError, CliResult};
use crate::evaluate::{evaluate_model, probe_report, Evaluation, ProbeCurve, ProbeStats};

pub const PROBE_COUNT: usize = 9;
const RECHECK_DRAWS: usize = 32;

pub fn model_for(experiment: Experiment) -> CliResult<ModelSpec> {
    let unit = Likelihood::Normal { scale: 1.0 };
    let (widths, act, lik) = match experiment {
        Experiment::Sinusoid => (vec![1, 20, 1], Activation::Tanh, unit),
        Experiment::Mixture | Experiment::MixtureMultimodal => {
            (vec![1, 20, 20, 1], Activation::Elu, unit)
        }
        Experiment::MixtureWellspec => (
            vec![1, 20, 20, 2],
            Activation::Elu,
            Likelihood::EqualMixture {
                components: 2,
                scale: 1.0,
            },
        ),
        Experiment::Toy | Experiment::Verify => {
            return Err(CliError::Config(format!(
                "{} does not train a network",
                experiment.as_str()
            )))
        }
    };
    Ok(ModelSpec::new(MlpArch::new(widths, act)?, lik)?)
}

pub fn objective_for(cfg: &ExperimentConfig) -> CliResult<Objective> {
    Ok(Objective::new(cfg.loss, cfg.bound_params()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub data_term_nats: f64,
    pub kl_term_nats: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Final posterior, or the last finite one when training aborted.
    pub posterior: VariationalPosterior,
    pub prior: MeanFieldGaussian,
    pub metrics: Vec<MetricRow>,
    pub steps_completed: usize,
    pub abort: Option<Abort>,
}

/// Optimizes `objective` with Adam, drawing fresh noise every step.
pub fn train(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    objective: &Objective,
    data: &Dataset,
    init_rng: &mut Rng,
    train_rng: &mut Rng,
) -> CliResult<TrainResult> {
    let scheme = InitScheme {
        components: cfg.components,
        ..InitScheme::default()
    };
    let (mut post, prior) = init_params(&model.arch, init_rng, scheme)?;
    let schedule = LearningRate {
        lr0: cfg.lr0,
        decay_rate: cfg.decay_rate,
        decay_steps: cfg.decay_steps as u64,
    };
    let mut flat = post.to_flat();
    let mut opt = OptimizerState::new(OptimizerKind::Adam, flat.len(), schedule)?;
    let (x, y) = (data.x_column(), data.y_column());
    let mut metrics = Vec::with_capacity(cfg.steps / cfg.log_every + 2);
    for step in 0..cfg.steps {
        let noise = sample_noise(&post, train_rng, cfg.m)?;
        let abort = |message: String| Abort { step, message };
        let eval = match loss_and_grad(model, &post, &prior, objective, &x, &y, &noise) {
            Ok(e) => e,
            Err(e) => return Ok(aborted(post, prior, metrics, step, abort(e.to_string()))),
        };
        if !eval.total.is_finite() {
            let msg = format!(
                "loss {} (data {}, kl {})",
                eval.total, eval.data_term, eval.kl_term
            );
            return Ok(aborted(post, prior, metrics, step, abort(msg)));
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            metrics.push(MetricRow {
                step,
                loss: eval.total,
                data_term_nats: eval.data_term,
                kl_term_nats: eval.kl_term,
                lr: opt.current_lr(),
            });
        }
        if let Err(e) = opt.update(&mut flat, &eval.grad) {
            return Ok(aborted(post, prior, metrics, step, abort(e.to_string())));
        }
        post = match post.with_flat(&flat) {
            Ok(p) => p,
            Err(e) => return Ok(aborted(post, prior, metrics, step, abort(e.to_string()))),
        };
    }
    Ok(TrainResult {
        posterior: post,
        prior,
        metrics,
        steps_completed: cfg.steps,
        abort: None,
    })
}

fn aborted(
    posterior: VariationalPosterior,
    prior: MeanFieldGaussian,
    metrics: Vec<MetricRow>,
    step: usize,
    abort: Abort,
) -> TrainResult {
    TrainResult {
        posterior,
        prior,
        metrics,
        steps_completed: step,
        abort: Some(abort),
    }
}

/// Final logged data term against a fresh-noise re-evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataTermRecheck {
    pub logged: f64,
    pub mean: f64,
    /// Spread of a single evaluation, the scale of the logged value's error.
    pub sd: f64,
    pub within_3se: bool,
}

pub fn recheck_data_term(
    model: &ModelSpec,
    train: &TrainResult,
    objective: &Objective,
    data: &Dataset,
    m: usize,
    rng: &mut Rng,
) -> CliResult<Option<DataTermRecheck>> {
    let Some(last) = train.metrics.last() else {
        return Ok(None);
    };
    let (x, y) = (data.x_column(), data.y_column());
    let values = (0..RECHECK_DRAWS)
        .map(|_| {
            let noise = sample_noise(&train.posterior, rng, m)?;
            let e = loss_and_grad(model, &train.posterior, &train.prior, objective, &x, &y, &noise)?;
            Ok(e.data_term)
        })
        .collect::<CliResult<Vec<f64>>>()?;
    let (mean, se) = mean_and_se(&values);
    let sd = se * (RECHECK_DRAWS as f64).sqrt();
    // The logged value is one draw at the pre-update parameters, so allow
    // the spread of a single draw plus the standard error of the mean.
    let tol = 3.0 * (sd * sd + se * se).sqrt();
    Ok(Some(DataTermRecheck {
        logged: last.data_term_nats,
        mean,
        sd,
        within_3se: (last.data_term_nats - mean).abs() <= tol.max(1e-12),
    }))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub truth: GenerativeTruth,
    pub train: TrainResult,
    pub evaluation: Evaluation,
    pub probes: Vec<ProbeStats>,
    pub curves: Vec<ProbeCurve>,
    pub recheck: Option<DataTermRecheck>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

pub fn probe_xs() -> Vec<f64> {
    evenly_spaced(X_LO, X_HI, PROBE_COUNT)
}

/// Trains, evaluates on the `seed + 1` test set and computes probe summaries.
pub fn run_experiment(cfg: &ExperimentConfig) -> CliResult<RunOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let model = model_for(cfg.experiment)?;
    let objective = objective_for(cfg)?;
    let (data, truth) = gen_dataset(cfg)?;
    let test = gen_test_dataset(cfg)?;
    let mut init_rng = stream_rng(cfg.seed, Stream::Init);
    let mut train_rng = stream_rng(cfg.seed, Stream::Train);
    let train = train(cfg, &model, &objective, &data, &mut init_rng, &mut train_rng)?;
    let mut eval_rng = stream_rng(cfg.seed, Stream::Eval);
    let evaluation = evaluate_model(
        &model,
        &train.posterior,
        &truth,
        &test,
        cfg.eval_samples,
        &mut eval_rng,
    )?;
    let (probes, curves) = probe_report(
        &model,
        &train.posterior,
        &truth,
        &probe_xs(),
        cfg.eval_samples,
        &mut eval_rng,
    )?;
    let recheck = recheck_data_term(&model, &train, &objective, &data, cfg.m, &mut eval_rng)?;
    Ok(RunOutcome {
        config: cfg.clone(),
        model,
        truth,
        train,
        evaluation,
        probes,
        curves,
        recheck,
        warnings: objective.bound.warnings(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
