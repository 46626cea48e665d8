use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::CheckReport;
use crate::posttrain::run::{EvalRecord, EvalStats, RunObserver, TrainRecord};

/// First line of every metrics CSV.
pub const METRICS_VERSION: &str = "#metrics-v1";
/// First line of every pretraining loss CSV.
pub const PRETRAIN_VERSION: &str = "#pretrain-v1";
/// Schema version of every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Train or eval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// One metrics CSV row. Train rows leave the eval columns empty and vice
/// versa; `wall_time` is seconds since the run started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub phase: Phase,
    pub loss: Option<f64>,
    pub reward_mean: f64,
    pub reward_std: Option<f64>,
    pub grad_norm: Option<f64>,
    pub w_sim_mean: Option<f64>,
    pub k_mean: Option<f64>,
    pub j_mean: Option<f64>,
    pub accuracy: Option<f64>,
    pub ema_reward_mean: Option<f64>,
    pub ema_accuracy: Option<f64>,
    pub wall_time: f64,
}

/// Column names in file order.
pub const METRICS_COLUMNS: [&str; 13] = [
    "iteration",
    "phase",
    "loss",
    "reward_mean",
    "reward_std",
    "grad_norm",
    "w_sim_mean",
    "k_mean",
    "j_mean",
    "accuracy",
    "ema_reward_mean",
    "ema_accuracy",
    "wall_time",
];

impl MetricsRow {
    pub fn train(r: &TrainRecord, wall_time: f64) -> Self {
        Self {
            iteration: r.iteration,
            phase: Phase::Train,
            loss: Some(r.loss),
            reward_mean: r.reward_mean,
            reward_std: None,
            grad_norm: Some(r.grad_norm),
            w_sim_mean: Some(r.w_sim_mean),
            k_mean: Some(r.k_mean),
            j_mean: Some(r.j_mean),
            accuracy: None,
            ema_reward_mean: None,
            ema_accuracy: None,
            wall_time,
        }
    }

    pub fn eval(r: &EvalRecord, wall_time: f64) -> Self {
        Self {
            iteration: r.iteration,
            phase: Phase::Eval,
            loss: None,
            reward_mean: r.raw.reward_mean,
            reward_std: Some(r.raw.reward_std),
            grad_norm: None,
            w_sim_mean: None,
            k_mean: None,
            j_mean: None,
            accuracy: r.raw.accuracy,
            ema_reward_mean: Some(r.ema.reward_mean),
            ema_accuracy: r.ema.accuracy,
            wall_time,
        }
    }

    /// Value of a numeric column by name.
    pub fn metric(&self, name: &str) -> Result<Option<f64>> {
        Ok(match name {
            "iteration" => Some(self.iteration as f64),
            "loss" => self.loss,
            "reward_mean" => Some(self.reward_mean),
            "reward_std" => self.reward_std,
            "grad_norm" => self.grad_norm,
            "w_sim_mean" => self.w_sim_mean,
            "k_mean" => self.k_mean,
            "j_mean" => self.j_mean,
            "accuracy" => self.accuracy,
            "ema_reward_mean" => self.ema_reward_mean,
            "ema_accuracy" => self.ema_accuracy,
            "wall_time" => Some(self.wall_time),
            _ => {
                return Err(Error::config(
                    "metric",
                    format!("unknown metric `{name}` (columns: {})", METRICS_COLUMNS.join(", ")),
                ))
            }
        })
    }
}

/// Streams train and eval records to a metrics CSV.
pub struct MetricsWriter {
    writer: csv::Writer<File>,
    start: Instant,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{METRICS_VERSION}")?;
        Ok(Self { writer: csv::Writer::from_writer(file), start: Instant::now() })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }

    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

impl RunObserver for MetricsWriter {
    fn on_train(&mut self, record: &TrainRecord) -> Result<()> {
        let row = MetricsRow::train(record, self.elapsed());
        self.write(&row)
    }

    fn on_eval(&mut self, record: &EvalRecord) -> Result<()> {
        let row = MetricsRow::eval(record, self.elapsed());
        self.write(&row)
    }
}

fn versioned_reader(path: &Path, version: &str) -> Result<csv::Reader<BufReader<File>>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != version {
        return Err(Error::Parse(format!(
            "{}: expected `{version}` on the first line, found `{}`",
            path.display(),
            first.trim_end()
        )));
    }
    Ok(csv::Reader::from_reader(reader))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut reader = versioned_reader(path.as_ref(), METRICS_VERSION)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub iteration: usize,
    pub loss: f64,
}

pub fn write_pretrain_losses(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut file = File::create(path)?;
    writeln!(file, "{PRETRAIN_VERSION}")?;
    let mut w = csv::Writer::from_writer(file);
    for (i, &loss) in losses.iter().enumerate() {
        w.serialize(PretrainRow { iteration: i + 1, loss })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pretrain_losses(path: impl AsRef<Path>) -> Result<Vec<PretrainRow>> {
    let mut reader = versioned_reader(path.as_ref(), PRETRAIN_VERSION)?;
    Ok(reader.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Periodic evaluations of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub schema_version: u32,
    pub records: Vec<EvalRecord>,
}

/// Summary of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub run_id: String,
    pub method: String,
    pub iterations: usize,
    pub wall_time_secs: f64,
    /// Count of each grid index used as a leap anchor (index 0 excluded).
    pub anchor_histogram: Vec<u64>,
    pub final_eval: Option<EvalRecord>,
}

/// Evaluation of stored checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub checkpoint: String,
    pub stats: EvalStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub schema_version: u32,
    pub entries: Vec<CheckpointEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationFile {
    pub schema_version: u32,
    pub pass: bool,
    pub checks: Vec<CheckReport>,
}

/// One run of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub value: String,
    pub run_id: String,
    pub metrics: String,
    pub final_eval: Option<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFile {
    pub schema_version: u32,
    pub axis: String,
    pub runs: Vec<AblationRun>,
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Aligns one metric across several metrics files by iteration: one row per
/// iteration present in any series, empty cells where a series has no value.
pub fn align_series(series: &[(String, Vec<MetricsRow>)], metric: &str, phase: Phase) -> Result<Vec<(usize, Vec<Option<f64>>)>> {
    if metric == "phase" || !METRICS_COLUMNS.contains(&metric) {
        return Err(Error::config(
            "metric",
            format!("unknown metric `{metric}` (columns: {})", METRICS_COLUMNS.join(", ")),
        ));
    }
    let mut table: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
    for (col, (_, rows)) in series.iter().enumerate() {
        for row in rows.iter().filter(|r| r.phase == phase) {
            let value = row.metric(metric)?;
            let cells = table.entry(row.iteration).or_insert_with(|| vec![None; series.len()]);
            cells[col] = value;
        }
    }
    Ok(table.into_iter().collect())
}

pub fn write_plot_data(path: impl AsRef<Path>, labels: &[String], rows: &[(usize, Vec<Option<f64>>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (it, cells) in rows {
        let mut record = vec![it.to_string()];
        record.extend(cells.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train(it: usize, reward: f64) -> TrainRecord {
        TrainRecord { iteration: it, loss: 0.5, reward_mean: reward, grad_norm: 1.0, w_sim_mean: 2.0, k_mean: 0.7, j_mean: 0.2 }
    }

    #[test]
    fn metrics_round_trip_with_version_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.on_train(&train(1, 0.25)).unwrap();
        let stats = EvalStats { reward_mean: 0.3, reward_std: 0.1, accuracy: Some(0.5) };
        w.on_eval(&EvalRecord { iteration: 1, raw: stats, ema: stats }).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_VERSION));
        assert_eq!(lines.next().unwrap(), METRICS_COLUMNS.join(","));
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].phase, Phase::Train);
        assert_eq!(rows[0].accuracy, None);
        assert_eq!(rows[1].accuracy, Some(0.5));
        assert_eq!(rows[1].loss, None);
    }

    #[test]
    fn unversioned_metrics_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "iteration,phase\n").unwrap();
        assert!(read_metrics(&path).is_err());
    }

    #[test]
    fn alignment_does_not_interpolate() {
        let a: Vec<MetricsRow> = [1, 2, 3].iter().map(|&i| MetricsRow::train(&train(i, i as f64), 0.0)).collect();
        let b: Vec<MetricsRow> = [2, 4].iter().map(|&i| MetricsRow::train(&train(i, 10.0 * i as f64), 0.0)).collect();
        let rows = align_series(&[("a".into(), a), ("b".into(), b)], "reward_mean", Phase::Train).unwrap();
        assert_eq!(
            rows,
            vec![
                (1, vec![Some(1.0), None]),
                (2, vec![Some(2.0), Some(20.0)]),
                (3, vec![Some(3.0), None]),
                (4, vec![None, Some(40.0)]),
            ]
        );
        assert!(align_series(&[("a".into(), vec![MetricsRow::train(&train(1, 0.0), 0.0)])], "nope", Phase::Train).is_err());
    }
}
