//! Output files. Each run owns its directory; nothing is appended.

use std::fs;
use std::path::Path;

use pacm_core::models::VariationalPosterior;
use pacm_core::nats_to_bits;
use pacm_core::theory_checks::CheckReport;
use serde::{Deserialize, Serialize};

use crate::config::{loss_name, ExperimentConfig};
use crate::error::CliResult;
use crate::evaluate::{ProbeCurve, ProbeStats};
use crate::toy::{ToyStudy, SOLVERS};
use crate::train::{Abort, DataTermRecheck, MetricRow, RunOutcome};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PREDICTIVE_FILE: &str = "predictive.csv";
pub const POSTERIOR_FILE: &str = "posterior.json";
pub const CHECKS_FILE: &str = "checks.json";
pub const TOY_SUMMARY_FILE: &str = "toy_summary.json";
pub const TOY_TABLE_FILE: &str = "toy_table.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Converged {
    /// Every step ran without a non-finite loss.
    pub training_completed: bool,
    /// The final logged data term agrees with a fresh re-evaluation.
    pub data_term_consistent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub loss: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub lpp_nats: f64,
    pub lpp_bits: f64,
    pub lpp_se_nats: f64,
    pub kl_to_truth_nats: f64,
    pub kl_to_truth_bits: f64,
    pub kl_to_truth_se_nats: f64,
    pub final_loss_nats: Option<f64>,
    pub final_data_term_nats: Option<f64>,
    pub final_kl_term_nats: Option<f64>,
    pub steps_completed: usize,
    pub converged: Converged,
    pub abort: Option<Abort>,
    pub data_term_recheck: Option<DataTermRecheck>,
    pub probes: Vec<ProbeStats>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

impl Summary {
    pub fn from_outcome(out: &RunOutcome) -> Self {
        let last = out.train.metrics.last();
        let ev = out.evaluation;
        Self {
            experiment: out.config.experiment.as_str().to_string(),
            loss: loss_name(out.config.loss).to_string(),
            seed: out.config.seed,
            config: out.config.clone(),
            lpp_nats: ev.lpp,
            lpp_bits: nats_to_bits(ev.lpp),
            lpp_se_nats: ev.lpp_se,
            kl_to_truth_nats: ev.kl_to_truth,
            kl_to_truth_bits: nats_to_bits(ev.kl_to_truth),
            kl_to_truth_se_nats: ev.kl_se,
            final_loss_nats: last.map(|r| r.loss),
            final_data_term_nats: last.map(|r| r.data_term_nats),
            final_kl_term_nats: last.map(|r| r.kl_term_nats),
            steps_completed: out.train.steps_completed,
            converged: Converged {
                training_completed: out.train.abort.is_none(),
                data_term_consistent: out.recheck.map(|r| r.within_3se),
            },
            abort: out.train.abort.clone(),
            data_term_recheck: out.recheck,
            probes: out.probes.clone(),
            warnings: out.warnings.clone(),
            wall_time_s: out.wall_time_s,
        }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["step", "loss", "data_term_nats", "kl_term_nats", "lr"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictive(path: &Path, curves: &[ProbeCurve]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "predictive_density", "truth_density"])?;
    for c in curves {
        for ((y, p), t) in c.y.iter().zip(&c.predictive).zip(&c.truth) {
            w.write_record([c.x.to_string(), y.to_string(), p.to_string(), t.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PosteriorFile<'a> {
    posterior: &'a VariationalPosterior,
    flat: Vec<f64>,
}

/// Writes every artifact of a training run and returns its summary.
pub fn emit_report(out: &RunOutcome, out_dir: &Path) -> CliResult<Summary> {
    fs::create_dir_all(out_dir)?;
    write_metrics(&out_dir.join(METRICS_FILE), &out.train.metrics)?;
    write_predictive(&out_dir.join(PREDICTIVE_FILE), &out.curves)?;
    write_json(
        &out_dir.join(POSTERIOR_FILE),
        &PosteriorFile {
            posterior: &out.train.posterior,
            flat: out.train.posterior.to_flat(),
        },
    )?;
    let summary = Summary::from_outcome(out);
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecksFile {
    pub seed: u64,
    pub trials: usize,
    pub all_passed: bool,
    pub reports: Vec<CheckReport>,
}

pub fn emit_checks(reports: &[CheckReport], trials: usize, seed: u64, out_dir: &Path) -> CliResult<ChecksFile> {
    fs::create_dir_all(out_dir)?;
    let file = ChecksFile {
        seed,
        trials,
        all_passed: reports.iter().all(|r| r.passed),
        reports: reports.to_vec(),
    };
    write_json(&out_dir.join(CHECKS_FILE), &file)?;
    Ok(file)
}

/// Writes the full study as JSON and a one-line-per-solver table of KL values.
pub fn emit_toy(study: &ToyStudy, out_dir: &Path) -> CliResult<()> {
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join(TOY_SUMMARY_FILE), study)?;
    let mut w = csv::Writer::from_path(out_dir.join(TOY_TABLE_FILE))?;
    w.write_record(["risk", "kl_bits", "kl_nats", "true_inf_nats", "true_pred_nats", "emp_inf_nats", "emp_pred_nats"])?;
    for (name, row) in SOLVERS.iter().zip(&study.rows) {
        w.write_record([
            name.to_string(),
            row.kl_bits.to_string(),
            row.kl_nats.to_string(),
            row.true_inf_nats.to_string(),
            row.true_pred_nats.to_string(),
            row.emp_inf_nats.to_string(),
            row.emp_pred_nats.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Compact text table of KL values in bits, one column per solver.
pub fn toy_table_text(study: &ToyStudy) -> String {
    let mut header = String::from("risk");
    let mut values = String::from("KL (bits)");
    for row in &study.rows {
        header.push_str(&format!("\t{}", row.solver));
        values.push_str(&format!("\t{:.3}", row.kl_bits));
    }
    format!("{header}\n{values}\n")
}
