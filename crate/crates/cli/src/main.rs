use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pacm_cli::config::{Experiment, ExperimentConfig, LambdaModeName, ToyTruth};
use pacm_cli::report::{emit_checks, emit_report, emit_toy, toy_table_text};
use pacm_cli::sweep::{run_sweep, SweepPlan};
use pacm_cli::toy::toy_study;
use pacm_cli::train::run_experiment;
use pacm_cli::verify::run_verify;
use pacm_cli::CliResult;
use pacm_core::models::LossKind;
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "pacm", version, about = "Multisample predictive risk experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run(Box<RunArgs>),
    /// Run the numerical bound and identity checks.
    Verify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "runs/verify")]
        out: PathBuf,
    },
    /// Fit the six toy solvers and print the KL table.
    Toy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ToyTruth::Narrow)]
        truth: ToyTruth,
        #[arg(long, default_value = "runs/toy")]
        out: PathBuf,
    },
    /// Run every (loss, seed) pair of a sweep file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat JSON config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    experiment: Option<Experiment>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    lambda_mode: Option<LambdaModeName>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    allow_small_lambda: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    decay_rate: Option<f64>,
    #[arg(long)]
    decay_steps: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long, value_enum)]
    truth: Option<ToyTruth>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: pacm_core::Error| e.to_string())
}

impl RunArgs {
    fn overrides(&self) -> CliResult<Map<String, Value>> {
        let mut map = Map::new();
        let mut put = |k: &str, v: Value| {
            map.insert(k.to_string(), v);
        };
        if let Some(v) = self.experiment {
            put("experiment", serde_json::to_value(v)?);
        }
        if let Some(v) = self.loss {
            put("loss", serde_json::to_value(v)?);
        }
        if let Some(v) = self.lambda_mode {
            put("lambda_mode", serde_json::to_value(v)?);
        }
        if let Some(v) = self.truth {
            put("truth", serde_json::to_value(v)?);
        }
        if let Some(v) = &self.out {
            put("out_dir", serde_json::to_value(v)?);
        }
        if self.allow_small_lambda {
            put("allow_small_lambda", Value::Bool(true));
        }
        let numbers = [
            ("m", self.m.map(Value::from)),
            ("beta", self.beta.map(Value::from)),
            ("lambda", self.lambda.map(Value::from)),
            ("seed", self.seed.map(Value::from)),
            ("n_train", self.n_train.map(Value::from)),
            ("steps", self.steps.map(Value::from)),
            ("lr0", self.lr0.map(Value::from)),
            ("decay_rate", self.decay_rate.map(Value::from)),
            ("decay_steps", self.decay_steps.map(Value::from)),
            ("eval_samples", self.eval_samples.map(Value::from)),
            ("components", self.components.map(Value::from)),
            ("log_every", self.log_every.map(Value::from)),
        ];
        for (k, v) in numbers {
            if let Some(v) = v {
                put(k, v);
            }
        }
        Ok(map)
    }

    fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut map = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
            None => Map::new(),
        };
        map.extend(self.overrides()?);
        let experiment = match map.get("experiment") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Experiment::Sinusoid,
        };
        ExperimentConfig::from_overrides(experiment, &map)
    }
}

fn run(args: &RunArgs) -> CliResult<ExitCode> {
    let cfg = args.resolve()?;
    match cfg.experiment {
        Experiment::Toy => return toy(cfg.seed, cfg.truth, &cfg.out_dir),
        Experiment::Verify => return verify(1000, cfg.seed, &cfg.out_dir),
        _ => {}
    }
    let out = run_experiment(&cfg)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let summary = emit_report(&out, &cfg.out_dir)?;
    println!(
        "{} {}: lpp {:.4} nats, kl_to_truth {:.4} nats ({:.4} bits), {:.1}s",
        summary.experiment,
        summary.loss,
        summary.lpp_nats,
        summary.kl_to_truth_nats,
        summary.kl_to_truth_bits,
        summary.wall_time_s
    );
    if let Some(abort) = &summary.abort {
        eprintln!(
            "training aborted at step {}: {} (last finite posterior saved)",
            abort.step, abort.message
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(trials: usize, seed: u64, out: &std::path::Path) -> CliResult<ExitCode> {
    let reports = run_verify(trials, seed)?;
    for r in &reports {
        println!(
            "{} {}: {} trials, {} violations, worst slack {:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.violations,
            r.worst_slack
        );
    }
    let file = emit_checks(&reports, trials, seed, out)?;
    Ok(if file.all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn toy(seed: u64, truth: ToyTruth, out: &std::path::Path) -> CliResult<ExitCode> {
    let study = toy_study(seed, truth)?;
    emit_toy(&study, out)?;
    print!("{}", toy_table_text(&study));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Verify { trials, seed, out } => verify(*trials, *seed, out),
        Command::Toy { seed, truth, out } => toy(*seed, *truth, out),
        Command::Sweep { config } => SweepPlan::from_file(config)
            .and_then(|plan| run_sweep(&plan))
            .map(|summaries| {
                for s in &summaries {
                    println!(
                        "{} {} seed {}: lpp {:.4}, kl_to_truth {:.4} nats",
                        s.experiment, s.loss, s.seed, s.lpp_nats, s.kl_to_truth_nats
                    );
                }
                ExitCode::SUCCESS
            }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
