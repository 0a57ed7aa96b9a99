//! Fan-out over seeds and losses.
//!
//! A sweep file is a flat experiment config with two extra list keys,
//! `seeds` and `losses`, plus an optional `threads`. Every (loss, seed) pair
//! runs in `<out_dir>/<loss>_s<seed>` with its own random streams.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use pacm_core::models::LossKind;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{loss_name, Experiment, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::report::{emit_report, write_json, Summary};
use crate::train::run_experiment;

pub const SWEEP_SUMMARY_JSON: &str = "sweep_summary.json";
pub const SWEEP_SUMMARY_CSV: &str = "sweep_summary.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub runs: Vec<ExperimentConfig>,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl SweepPlan {
    pub fn from_json_str(text: &str) -> CliResult<Self> {
        let mut map: Map<String, Value> = serde_json::from_str(text)?;
        let seeds: Vec<u64> = match map.remove("seeds") {
            Some(v) => serde_json::from_value(v)?,
            None => Vec::new(),
        };
        let losses: Vec<LossKind> = match map.remove("losses") {
            Some(v) => serde_json::from_value(v)?,
            None => Vec::new(),
        };
        let threads: Option<usize> = match map.remove("threads") {
            Some(v) => Some(serde_json::from_value(v)?),
            None => None,
        };
        let experiment: Experiment = match map.get("experiment") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(CliError::Config("sweep needs an `experiment` key".into())),
        };
        if !experiment.is_regression() {
            return Err(CliError::Config(format!(
                "sweep runs regression experiments, not {}",
                experiment.as_str()
            )));
        }
        let base = ExperimentConfig::from_overrides(experiment, &map)?;
        let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
        let losses = if losses.is_empty() { vec![base.loss] } else { losses };
        let mut runs = Vec::with_capacity(seeds.len() * losses.len());
        for &loss in &losses {
            for &seed in &seeds {
                let mut cfg = base.clone();
                cfg.loss = loss;
                cfg.seed = seed;
                cfg.out_dir = base.out_dir.join(format!("{}_s{seed}", loss_name(loss)));
                runs.push(cfg);
            }
        }
        let threads = threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .clamp(1, runs.len());
        Ok(Self {
            runs,
            out_dir: base.out_dir,
            threads,
        })
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepRow {
    experiment: String,
    loss: String,
    seed: u64,
    lpp_nats: f64,
    kl_to_truth_nats: f64,
    kl_to_truth_bits: f64,
    training_completed: bool,
    out_dir: String,
}

/// Runs every planned config and writes merged summaries in run order.
pub fn run_sweep(plan: &SweepPlan) -> CliResult<Vec<Summary>> {
    let slots: Vec<Mutex<Option<CliResult<Summary>>>> =
        plan.runs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..plan.threads {
            scope.spawn(|| loop {
                let idx = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(cfg) = plan.runs.get(idx) else { break };
                let result = run_experiment(cfg).and_then(|out| emit_report(&out, &cfg.out_dir));
                *slots[idx].lock().expect("slot lock") = Some(result);
            });
        }
    });
    let summaries = slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every run finished"))
        .collect::<CliResult<Vec<_>>>()?;

    std::fs::create_dir_all(&plan.out_dir)?;
    write_json(&plan.out_dir.join(SWEEP_SUMMARY_JSON), &summaries)?;
    let mut w = csv::Writer::from_path(plan.out_dir.join(SWEEP_SUMMARY_CSV))?;
    for (s, cfg) in summaries.iter().zip(&plan.runs) {
        w.serialize(SweepRow {
            experiment: s.experiment.clone(),
            loss: s.loss.clone(),
            seed: s.seed,
            lpp_nats: s.lpp_nats,
            kl_to_truth_nats: s.kl_to_truth_nats,
            kl_to_truth_bits: s.kl_to_truth_bits,
            training_completed: s.converged.training_completed,
            out_dir: cfg.out_dir.display().to_string(),
        })?;
    }
    w.flush()?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_expands_losses_and_seeds() {
        let plan = SweepPlan::from_json_str(
            r#"{"experiment": "sinusoid", "seeds": [1, 2], "losses": ["elbo", "pacm", "pac2t"], "out_dir": "x", "threads": 2}"#,
        )
        .unwrap();
        assert_eq!(plan.runs.len(), 6);
        assert_eq!(plan.threads, 2);
        assert_eq!(plan.runs[0].out_dir, PathBuf::from("x/elbo_s1"));
        assert_eq!(plan.runs[5].loss, LossKind::Pac2t);
        assert_eq!(plan.runs[5].seed, 2);
    }

    #[test]
    fn rejects_non_regression_sweeps() {
        assert!(SweepPlan::from_json_str(r#"{"experiment": "toy"}"#).is_err());
    }

    #[test]
    fn threaded_sweep_matches_sequential_runs() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"{{"experiment": "sinusoid", "seeds": [3, 4], "losses": ["elbo", "iwae"], "n_train": 20, "steps": 10, "eval_samples": 5, "m": 2, "out_dir": {:?}, "threads": 3}}"#,
            dir.path().display().to_string()
        );
        let plan = SweepPlan::from_json_str(&text).unwrap();
        let summaries = run_sweep(&plan).unwrap();
        assert_eq!(summaries.len(), 4);
        for (s, cfg) in summaries.iter().zip(&plan.runs) {
            let solo = run_experiment(cfg).unwrap();
            assert_eq!(s.lpp_nats, solo.evaluation.lpp);
            assert_eq!(s.seed, cfg.seed);
        }
        let csv = std::fs::read_to_string(dir.path().join(SWEEP_SUMMARY_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }
}
