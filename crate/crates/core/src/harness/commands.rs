use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow::checkpoint::Checkpoint;
use crate::flow::model::{VelocityModel, VelocityNet};
use crate::flow::pretrain::pretrain;
use crate::flow::scheduler::Scheduler;
use crate::harness::artifacts::{
    align_series, read_metrics, write_json, write_plot_data, write_pretrain_losses, AblationFile, AblationRun, CheckpointEval,
    EvalFile, EvaluationFile, MetricsWriter, Phase, RunSummary, VerificationFile, SCHEMA_VERSION,
};
use crate::harness::config::{parse_value, set_key, ExperimentConfig};
use crate::oracle::run_all_checks;
use crate::posttrain::run::{evaluate, finetune_run, EvalRecord};

pub const SNAPSHOT_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRETRAIN_FILE: &str = "pretrain.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const RUN_FILE: &str = "run.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const VERIFICATION_FILE: &str = "verification.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const PRETRAINED_CKPT: &str = "checkpoints/pretrained.ckpt";
pub const FINETUNED_CKPT: &str = "checkpoints/finetuned.ckpt";
pub const FINETUNED_EMA_CKPT: &str = "checkpoints/finetuned_ema.ckpt";

fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    std::fs::write(dir.join(SNAPSHOT_FILE), cfg.snapshot()?)?;
    Ok(dir)
}

/// Writes the diagnostics of a non-finite abort next to the run's other
/// artifacts and points the error at them.
fn with_diagnostics<T>(dir: &Path, result: Result<T>) -> Result<T> {
    match result {
        Err(Error::NonFinite { context }) => {
            let path = dir.join(DIAGNOSTICS_FILE);
            std::fs::write(&path, format!("{context}\n"))?;
            Err(Error::NonFinite {
                context: format!("{} (diagnostics: {})", context.lines().next().unwrap_or(""), path.display()),
            })
        }
        other => other,
    }
}

/// Pretrains the configured model and stores its checkpoint and losses.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = prepare_run_dir(cfg)?;
    let mut net = VelocityNet::new(cfg.net_spec(), cfg.model.seed)?;
    let scheduler = Scheduler::Rectified;
    let (losses, rng) = with_diagnostics(&dir, pretrain(&mut net, cfg.data.mixture(), &cfg.pretrain, &scheduler))?;
    write_pretrain_losses(dir.join(PRETRAIN_FILE), &losses)?;
    let path = dir.join(PRETRAINED_CKPT);
    Checkpoint::new(net, scheduler, rng).save(&path)?;
    Ok(path)
}

/// Loads `checkpoint`, or the run's own pretrained checkpoint, pretraining
/// first when neither exists.
pub fn load_or_pretrain(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Checkpoint> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            let own = cfg.run_dir().join(PRETRAINED_CKPT);
            if own.exists() {
                own
            } else {
                run_pretrain(cfg)?
            }
        }
    };
    let ckpt = Checkpoint::load(&path)?;
    let (have, want) = (ckpt.net.spec(), cfg.net_spec());
    if *have != want {
        return Err(Error::config(
            "model",
            format!("checkpoint {} holds {have:?}, config describes {want:?}", path.display()),
        ));
    }
    Ok(ckpt)
}

/// Fine-tunes from a pretrained checkpoint and writes metrics, evaluations,
/// checkpoints and a run summary.
pub fn run_finetune(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunSummary> {
    let ckpt = load_or_pretrain(cfg, checkpoint)?;
    let dir = prepare_run_dir(cfg)?;
    let start = Instant::now();
    let mut metrics = MetricsWriter::create(dir.join(METRICS_FILE))?;
    let out = with_diagnostics(
        &dir,
        finetune_run(&ckpt.net, &ckpt.scheduler, &cfg.finetune, &cfg.reward, &cfg.eval, &mut metrics),
    )?;
    Checkpoint::new(out.model, ckpt.scheduler.clone(), ckpt.rng.clone()).save(dir.join(FINETUNED_CKPT))?;
    Checkpoint::new(out.ema, ckpt.scheduler.clone(), ckpt.rng.clone()).save(dir.join(FINETUNED_EMA_CKPT))?;
    write_json(dir.join(EVAL_FILE), &EvalFile { schema_version: SCHEMA_VERSION, records: out.evals.clone() })?;
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        run_id: cfg.run_id.clone(),
        method: cfg.finetune.method.name().to_string(),
        iterations: out.train.len(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        anchor_histogram: out.anchor_histogram,
        final_eval: out.evals.last().cloned(),
    };
    write_json(dir.join(RUN_FILE), &summary)?;
    Ok(summary)
}

/// Evaluates the given checkpoint, or every checkpoint the run has stored.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvaluationFile> {
    let dir = cfg.run_dir();
    let paths: Vec<PathBuf> = match checkpoint {
        Some(p) => vec![p.to_path_buf()],
        None => [PRETRAINED_CKPT, FINETUNED_CKPT, FINETUNED_EMA_CKPT]
            .iter()
            .map(|p| dir.join(p))
            .filter(|p| p.exists())
            .collect(),
    };
    if paths.is_empty() {
        return Err(Error::Checkpoint(format!("no checkpoints under {}", dir.display())));
    }
    let mut entries = Vec::new();
    for path in paths {
        let ckpt = Checkpoint::load(&path)?;
        let stats = evaluate(&ckpt.net, ckpt.net.params(), &cfg.reward, &cfg.eval)?;
        entries.push(CheckpointEval { checkpoint: path.display().to_string(), stats });
    }
    let file = EvaluationFile { schema_version: SCHEMA_VERSION, entries };
    std::fs::create_dir_all(&dir)?;
    write_json(dir.join(EVALUATION_FILE), &file)?;
    Ok(file)
}

/// Runs the gradient oracle checks and writes their report into `dir`.
pub fn run_verify(dir: &Path, seed: u64) -> Result<VerificationFile> {
    std::fs::create_dir_all(dir)?;
    let checks = run_all_checks(seed)?;
    let file = VerificationFile {
        schema_version: SCHEMA_VERSION,
        pass: checks.iter().all(|c| c.pass),
        checks,
    };
    write_json(dir.join(VERIFICATION_FILE), &file)?;
    Ok(file)
}

/// Splits `a,b,[c,d]` on top-level commas.
pub fn split_values(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for ch in text.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(current.trim().to_string());
                current.clear();
                continue;
            }
            _ => {}
        }
        current.push(ch);
    }
    if !current.trim().is_empty() {
        out.push(current.trim().to_string());
    }
    out
}

fn slug(value: &str) -> String {
    let s: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

/// Runs one fine-tuning job per value of `axis`. Runs that only change
/// fine-tuning, reward or evaluation settings share the base run's
/// pretrained checkpoint.
pub fn run_ablation(base: &toml::Table, axis: &str, values: &[String]) -> Result<AblationFile> {
    if values.is_empty() {
        return Err(Error::config("values", "at least one value is required"));
    }
    let base_cfg = ExperimentConfig::from_table(base.clone())?;
    let section = if axis.contains('.') { axis.split('.').next().unwrap_or("") } else { "finetune" };
    let shared = if matches!(section, "finetune" | "reward" | "eval") {
        load_or_pretrain(&base_cfg, None)?;
        Some(base_cfg.run_dir().join(PRETRAINED_CKPT))
    } else {
        None
    };
    let leaf = axis.rsplit('.').next().unwrap_or(axis);
    let mut runs = Vec::with_capacity(values.len());
    for value in values {
        let mut table = base.clone();
        set_key(&mut table, axis, parse_value(value))?;
        let run_id = format!("{}-{}-{}", base_cfg.run_id, leaf, slug(value));
        set_key(&mut table, "run_id", toml::Value::String(run_id.clone()))?;
        let cfg = ExperimentConfig::from_table(table)?;
        let summary = run_finetune(&cfg, shared.as_deref())?;
        runs.push(AblationRun {
            value: value.clone(),
            run_id,
            metrics: cfg.run_dir().join(METRICS_FILE).display().to_string(),
            final_eval: summary.final_eval,
        });
    }
    let file = AblationFile { schema_version: SCHEMA_VERSION, axis: axis.to_string(), runs };
    std::fs::create_dir_all(base_cfg.run_dir())?;
    write_json(base_cfg.run_dir().join(format!("{}_{}", slug(axis), ABLATION_FILE)), &file)?;
    Ok(file)
}

/// Parses `label=path` series arguments; a bare path is labelled by its
/// parent directory name.
pub fn parse_series(args: &[String]) -> Result<Vec<(String, PathBuf)>> {
    args.iter()
        .map(|a| match a.split_once('=') {
            Some((label, path)) if !label.is_empty() => Ok((label.to_string(), PathBuf::from(path))),
            Some(_) => Err(Error::config("series", format!("empty label in `{a}`"))),
            None => {
                let path = PathBuf::from(a);
                let label = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| a.clone());
                Ok((label, path))
            }
        })
        .collect()
}

/// Writes one metric from several metrics files as aligned columns.
pub fn emit_plot_data(series: &[(String, PathBuf)], metric: &str, phase: Phase, out: &Path) -> Result<usize> {
    if series.is_empty() {
        return Err(Error::config("series", "at least one metrics file is required"));
    }
    let loaded = series
        .iter()
        .map(|(label, path)| Ok((label.clone(), read_metrics(path)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = align_series(&loaded, metric, phase)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let labels: Vec<String> = series.iter().map(|(l, _)| l.clone()).collect();
    write_plot_data(out, &labels, &rows)?;
    Ok(rows.len())
}

/// Short human summary of an evaluation record.
pub fn describe_eval(rec: &EvalRecord) -> String {
    let acc = |a: Option<f64>| a.map(|v| format!(", accuracy {v:.4}")).unwrap_or_default();
    format!(
        "iteration {}: reward {:.4}{} (ema {:.4}{})",
        rec.iteration,
        rec.raw.reward_mean,
        acc(rec.raw.accuracy),
        rec.ema.reward_mean,
        acc(rec.ema.accuracy)
    )
}
