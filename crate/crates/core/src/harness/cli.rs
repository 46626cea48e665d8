use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::harness::artifacts::Phase;
use crate::harness::commands::{
    describe_eval, emit_plot_data, parse_series, run_ablation, run_eval, run_finetune, run_pretrain, run_verify, split_values,
};
use crate::harness::config::{parse_table, parse_value, set_key, ExperimentConfig};
use crate::posttrain::config::Method;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for failed checks and I/O errors.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for invalid configuration or arguments.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for a run aborted on a non-finite value.
pub const EXIT_NON_FINITE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "leapflow", version, about = "Reward fine-tuning of small conditional flow models")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the fine-tuning seed (the oracle seed for `verify`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the fine-tuning method.
    #[arg(long, global = true)]
    pub method: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Train,
    Eval,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the flow model with flow matching.
    Pretrain,
    /// Fine-tune a pretrained model on the configured reward.
    Finetune {
        /// Pretrained checkpoint; defaults to the run's own, pretraining if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or all checkpoints of the run.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the gradient oracle checks.
    Verify,
    /// Fine-tune once per value of one configuration key.
    Ablate {
        /// Dotted key; a bare name addresses the `finetune` section.
        #[arg(long)]
        axis: String,
        /// Comma-separated TOML values, e.g. `0,0.3,1.0` or `[0,0.5],[0,1]`.
        #[arg(long)]
        values: String,
    },
    /// Align one metric from several metrics files by iteration.
    EmitPlotData {
        /// `label=path/to/metrics.csv` entries.
        #[arg(required = true)]
        series: Vec<String>,
        #[arg(long, default_value = "reward_mean")]
        metric: String,
        #[arg(long, value_enum, default_value = "train")]
        phase: PhaseArg,
    },
}

fn load_table(cli: &Cli) -> Result<toml::Table> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config", "this subcommand needs --config <path>"))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
    let mut table = parse_table(&text)?;
    if let Some(seed) = cli.seed {
        set_key(&mut table, "finetune.seed", toml::Value::Integer(seed as i64))?;
    }
    if let Some(out) = &cli.out {
        set_key(&mut table, "out_dir", toml::Value::String(out.display().to_string()))?;
    }
    if let Some(m) = &cli.method {
        let method: Method = m.parse()?;
        set_key(&mut table, "finetune.method", parse_value(method.name()))?;
    }
    Ok(table)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    ExperimentConfig::from_table(load_table(cli)?)
}

fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Pretrain => {
            let cfg = load_config(cli)?;
            let path = run_pretrain(&cfg)?;
            println!("pretrained checkpoint: {}", path.display());
        }
        Command::Finetune { checkpoint } => {
            let cfg = load_config(cli)?;
            let summary = run_finetune(&cfg, checkpoint.as_deref())?;
            println!(
                "{} finished {} iterations in {:.1}s; artifacts in {}",
                summary.method,
                summary.iterations,
                summary.wall_time_secs,
                cfg.run_dir().display()
            );
            if let Some(rec) = &summary.final_eval {
                println!("{}", describe_eval(rec));
            }
        }
        Command::Eval { checkpoint } => {
            let cfg = load_config(cli)?;
            for e in run_eval(&cfg, checkpoint.as_deref())?.entries {
                let acc = e.stats.accuracy.map(|a| format!(", accuracy {a:.4}")).unwrap_or_default();
                println!("{}: reward {:.4} ± {:.4}{acc}", e.checkpoint, e.stats.reward_mean, e.stats.reward_std);
            }
        }
        Command::Verify => {
            let dir = match (&cli.out, &cli.config) {
                (Some(out), _) => out.clone(),
                (None, Some(_)) => load_config(cli)?.run_dir(),
                (None, None) => Path::new("runs").join("verify"),
            };
            let report = run_verify(&dir, cli.seed.unwrap_or(0))?;
            for c in &report.checks {
                println!(
                    "{} {}: max error {:.3e} (tolerance {:.0e}, {} trials)",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.check,
                    c.max_error,
                    c.tolerance,
                    c.trials
                );
            }
            if !report.pass {
                return Ok(EXIT_FAILURE);
            }
        }
        Command::Ablate { axis, values } => {
            let table = load_table(cli)?;
            let file = run_ablation(&table, axis, &split_values(values))?;
            for run in &file.runs {
                let eval = run.final_eval.as_ref().map(describe_eval).unwrap_or_default();
                println!("{} = {}: {} {eval}", file.axis, run.value, run.metrics);
            }
        }
        Command::EmitPlotData { series, metric, phase } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| Error::config("--out", "emit-plot-data needs --out <file>"))?;
            let phase = match phase {
                PhaseArg::Train => Phase::Train,
                PhaseArg::Eval => Phase::Eval,
            };
            let rows = emit_plot_data(&parse_series(series)?, metric, phase, &out)?;
            println!("{rows} rows written to {}", out.display());
        }
    }
    Ok(EXIT_OK)
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parse(_) => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_FAILURE,
    }
}

/// Runs the parsed command line and returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}
