//! Experiment configuration.
//!
//! Config files are flat JSON objects keyed by the field names below. Missing
//! keys fall back to the per-experiment defaults from [`ExperimentConfig::defaults`].

use std::path::{Path, PathBuf};

use pacm_core::models::LossKind;
use pacm_core::objectives::{BoundParams, LambdaMode};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Toy,
    Sinusoid,
    Mixture,
    MixtureMultimodal,
    MixtureWellspec,
    Verify,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Toy => "toy",
            Experiment::Sinusoid => "sinusoid",
            Experiment::Mixture => "mixture",
            Experiment::MixtureMultimodal => "mixture-multimodal",
            Experiment::MixtureWellspec => "mixture-wellspec",
            Experiment::Verify => "verify",
        }
    }

    /// Experiments that train a network.
    pub fn is_regression(self) -> bool {
        matches!(
            self,
            Experiment::Sinusoid
                | Experiment::Mixture
                | Experiment::MixtureMultimodal
                | Experiment::MixtureWellspec
        )
    }
}

pub fn loss_name(loss: LossKind) -> &'static str {
    match loss {
        LossKind::Elbo => "elbo",
        LossKind::Pacm => "pacm",
        LossKind::Pac2t => "pac2t",
        LossKind::Iwae => "iwae",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaModeName {
    BetaNm,
    LambdaStar,
    Explicit,
}

/// Truth used by the toy experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ToyTruth {
    /// `0.3 N(-2, 1) + 0.7 N(2, 1)`.
    #[default]
    Narrow,
    /// `0.3 N(-4, 2) + 0.7 N(4, 2)`.
    Wide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub loss: LossKind,
    pub m: usize,
    pub beta: f64,
    pub lambda_mode: LambdaModeName,
    /// Only read when `lambda_mode` is `explicit`.
    pub lambda: Option<f64>,
    pub allow_small_lambda: bool,
    pub seed: u64,
    pub n_train: usize,
    pub steps: usize,
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub eval_samples: usize,
    pub out_dir: PathBuf,
    /// Number of posterior mixture components.
    pub components: usize,
    pub log_every: usize,
    pub truth: ToyTruth,
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut cfg = Self {
            experiment,
            loss: LossKind::Pacm,
            m: 16,
            beta: 1.0,
            lambda_mode: LambdaModeName::BetaNm,
            lambda: None,
            allow_small_lambda: false,
            seed: 0,
            n_train: 1000,
            steps: 20_000,
            lr0: 0.01,
            decay_rate: 1.0,
            decay_steps: 100_000,
            eval_samples: 500,
            out_dir: PathBuf::from(format!("runs/{}", experiment.as_str())),
            components: 1,
            log_every: 100,
            truth: ToyTruth::Narrow,
        };
        match experiment {
            Experiment::Sinusoid => {}
            Experiment::Mixture | Experiment::MixtureWellspec => {
                cfg.steps = 30_000;
                cfg.decay_rate = 0.5;
            }
            Experiment::MixtureMultimodal => {
                cfg.steps = 30_000;
                cfg.decay_rate = 0.5;
                cfg.components = 2;
            }
            Experiment::Toy => {
                cfg.n_train = 5;
                cfg.steps = 1;
            }
            Experiment::Verify => {
                cfg.steps = 1;
            }
        }
        cfg
    }

    /// Defaults for the experiment named in `overrides`, with every present key replaced.
    pub fn from_overrides(experiment: Experiment, overrides: &Map<String, Value>) -> CliResult<Self> {
        let mut base = match serde_json::to_value(Self::defaults(experiment))? {
            Value::Object(map) => map,
            _ => unreachable!("config serializes to an object"),
        };
        for (k, v) in overrides {
            if !base.contains_key(k) {
                return Err(CliError::Config(format!("unknown config key `{k}`")));
            }
            base.insert(k.clone(), v.clone());
        }
        let cfg: Self = serde_json::from_value(Value::Object(base))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> CliResult<Self> {
        let map: Map<String, Value> = serde_json::from_str(text)?;
        let experiment = match map.get("experiment") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(CliError::Config("config needs an `experiment` key".into())),
        };
        Self::from_overrides(experiment, &map)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> CliResult<()> {
        let counts = [
            ("m", self.m),
            ("n_train", self.n_train),
            ("steps", self.steps),
            ("decay_steps", self.decay_steps),
            ("eval_samples", self.eval_samples),
            ("components", self.components),
            ("log_every", self.log_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CliError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CliError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(CliError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(CliError::Config(format!(
                "decay_rate must lie in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if !self.m.is_multiple_of(self.components) {
            return Err(CliError::Config(format!(
                "m = {} is not divisible by components = {}",
                self.m, self.components
            )));
        }
        if self.lambda_mode == LambdaModeName::Explicit && self.lambda.is_none() {
            return Err(CliError::Config("lambda_mode explicit needs `lambda`".into()));
        }
        if self.experiment.is_regression() {
            let bound = self.bound_params()?;
            if self.lambda_mode != LambdaModeName::BetaNm
                && !self.allow_small_lambda
                && !bound.satisfies_lambda_assumption()
            {
                return Err(CliError::Config(format!(
                    "lambda = {} is below m = {}; set allow_small_lambda to run anyway",
                    bound.lambda, self.m
                )));
            }
        }
        Ok(())
    }

    pub fn lambda_mode(&self) -> LambdaMode {
        match self.lambda_mode {
            LambdaModeName::BetaNm => LambdaMode::BetaNm,
            LambdaModeName::LambdaStar => LambdaMode::LambdaStar,
            LambdaModeName::Explicit => LambdaMode::Explicit(self.lambda.unwrap_or(f64::NAN)),
        }
    }

    pub fn bound_params(&self) -> CliResult<BoundParams> {
        let mut bound = BoundParams::new(self.n_train, self.m, self.beta)?;
        if self.allow_small_lambda {
            bound = bound.allowing_small_lambda();
        }
        Ok(bound.with_lambda_mode(self.lambda_mode())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for e in [
            Experiment::Toy,
            Experiment::Sinusoid,
            Experiment::Mixture,
            Experiment::MixtureMultimodal,
            Experiment::MixtureWellspec,
            Experiment::Verify,
        ] {
            ExperimentConfig::defaults(e).validate().unwrap();
        }
    }

    #[test]
    fn json_overrides_defaults() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"experiment": "mixture-wellspec", "loss": "elbo", "m": 4, "seed": 9}"#,
        )
        .unwrap();
        assert_eq!(cfg.loss, LossKind::Elbo);
        assert_eq!(cfg.m, 4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.steps, 30_000);
        assert_eq!(cfg.decay_rate, 0.5);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            r#"{"experiment": "sinusoid", "m": 0}"#,
            r#"{"experiment": "sinusoid", "beta": 0.0}"#,
            r#"{"experiment": "sinusoid", "bogus": 1}"#,
            r#"{"experiment": "sinusoid", "lambda_mode": "explicit"}"#,
            r#"{"experiment": "sinusoid", "lambda_mode": "explicit", "lambda": 2.0}"#,
            r#"{"experiment": "mixture-multimodal", "m": 3}"#,
            r#"{"loss": "elbo"}"#,
        ];
        for text in bad {
            assert!(ExperimentConfig::from_json_str(text).is_err(), "{text}");
        }
        let ok = r#"{"experiment": "sinusoid", "lambda_mode": "explicit", "lambda": 2.0, "allow_small_lambda": true}"#;
        assert!(ExperimentConfig::from_json_str(ok).is_ok());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::defaults(Experiment::MixtureMultimodal);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&text).unwrap(), cfg);
    }
}
