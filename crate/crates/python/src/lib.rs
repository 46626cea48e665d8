//! Python bindings for the `leapflow` crate.
//!
//! Matrices cross the boundary as lists of rows; structured configuration
//! and results cross as JSON strings with the same layout as the TOML files.

use leapflow::autodiff::{Tape, Tensor};
use leapflow::flow::{
    self, sample_batch, Activation, Checkpoint, Condition, MixtureSpec, NetSpec, PretrainConfig, SampleSettings, Scheduler,
    VelocityModel, VelocityNet,
};
use leapflow::posttrain::{self, EvalSpec, FineTuneConfig, SimilarityMode};
use leapflow::reward::RewardSpec;
use leapflow::{oracle, Error};
use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

fn py_err(err: Error) -> PyErr {
    match err {
        Error::Config { .. } | Error::Parse(_) | Error::ShapeMismatch { .. } => PyValueError::new_err(err.to_string()),
        Error::NonFinite { .. } => PyArithmeticError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn from_json<T: DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::matrix(rows.len(), cols, rows.concat()).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.cols().max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn to_conditions(labels: &[Option<usize>]) -> Vec<Condition> {
    labels.iter().map(|l| l.map_or(Condition::Null, Condition::Label)).collect()
}

fn parse_similarity(mode: &str) -> PyResult<SimilarityMode> {
    serde_json::from_value(serde_json::Value::String(mode.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown similarity mode `{mode}`")))
}

/// Conditional velocity MLP.
#[pyclass(module = "leapflow_py", name = "VelocityNet", skip_from_py_object)]
#[derive(Clone)]
struct PyVelocityNet {
    net: VelocityNet,
}

#[pymethods]
impl PyVelocityNet {
    #[new]
    #[pyo3(signature = (latent_dim, num_conditions, hidden = vec![64, 64, 64], activation = "tanh", seed = 0))]
    fn new(latent_dim: usize, num_conditions: usize, hidden: Vec<usize>, activation: &str, seed: u64) -> PyResult<Self> {
        let activation: Activation = serde_json::from_value(serde_json::Value::String(activation.to_string()))
            .map_err(|_| PyValueError::new_err(format!("unknown activation `{activation}`")))?;
        let spec = NetSpec { latent_dim, num_conditions, hidden, activation };
        Ok(Self { net: VelocityNet::new(spec, seed).map_err(py_err)? })
    }

    /// Loads the network stored in a checkpoint file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { net: Checkpoint::load(path).map_err(py_err)?.net })
    }

    /// Writes a checkpoint with the rectified scheduler.
    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::new(self.net.clone(), Scheduler::Rectified, ChaCha8Rng::seed_from_u64(0))
            .save(path)
            .map_err(py_err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.net.latent_dim()
    }

    #[getter]
    fn num_conditions(&self) -> usize {
        self.net.num_conditions()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Velocities for a batch; `None` labels select the null condition.
    fn velocity(&self, x: Vec<Vec<f64>>, ts: Vec<f64>, labels: Vec<Option<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let tape = Tape::inert();
        let v = self
            .net
            .velocity(&tape, self.net.params(), &to_tensor(&x)?, &ts, &to_conditions(&labels))
            .map_err(py_err)?;
        Ok(to_rows(&v))
    }

    /// Guided Euler sampling from the given noise rows.
    #[pyo3(signature = (noise, labels, steps = 25, guidance = 1.0))]
    fn sample(&self, noise: Vec<Vec<f64>>, labels: Vec<Option<usize>>, steps: usize, guidance: f64) -> PyResult<Vec<Vec<f64>>> {
        let settings = SampleSettings { steps, guidance };
        let out = sample_batch(&self.net, self.net.params(), &to_tensor(&noise)?, &to_conditions(&labels), settings)
            .map_err(py_err)?;
        Ok(to_rows(&out))
    }

    /// Flow-matching pretraining in place; returns the per-iteration loss.
    #[pyo3(signature = (data_json, config_json = None))]
    fn pretrain(&mut self, data_json: &str, config_json: Option<&str>) -> PyResult<Vec<f64>> {
        let data: MixtureSpec = serde_json::from_str(data_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let cfg: PretrainConfig = from_json(config_json)?;
        let (losses, _) = flow::pretrain(&mut self.net, &data, &cfg, &Scheduler::Rectified).map_err(py_err)?;
        Ok(losses)
    }

    /// Scores the evaluation set; returns `EvalStats` as JSON.
    #[pyo3(signature = (reward_json, eval_json = None))]
    fn evaluate(&self, reward_json: &str, eval_json: Option<&str>) -> PyResult<String> {
        let reward: RewardSpec = serde_json::from_str(reward_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let eval: EvalSpec = from_json(eval_json)?;
        let stats = posttrain::evaluate(&self.net, self.net.params(), &reward, &eval).map_err(py_err)?;
        to_json(&stats)
    }

    /// Fine-tunes a copy of this network. Returns the raw and EMA networks
    /// and a JSON document with the training records, evaluations and
    /// anchor histogram.
    #[pyo3(signature = (reward_json, config_json = None, eval_json = None))]
    fn finetune(&self, reward_json: &str, config_json: Option<&str>, eval_json: Option<&str>) -> PyResult<(Self, Self, String)> {
        let reward: RewardSpec = serde_json::from_str(reward_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let cfg: FineTuneConfig = from_json(config_json)?;
        let eval: EvalSpec = from_json(eval_json)?;
        let out = posttrain::finetune_run(&self.net, &Scheduler::Rectified, &cfg, &reward, &eval, &mut ()).map_err(py_err)?;
        let report = serde_json::json!({
            "train": out.train,
            "evals": out.evals,
            "anchor_histogram": out.anchor_histogram,
        });
        Ok((Self { net: out.model }, Self { net: out.ema }, report.to_string()))
    }
}

/// One-step rectified leap from time `k` to time `j` along velocity `v`.
#[pyfunction]
fn leap_predict(x_k: Vec<Vec<f64>>, k: f64, j: f64, v: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let tape = Tape::inert();
    let out = flow::leap_predict(&tape, &to_tensor(&x_k)?, k, j, &to_tensor(&v)?, &Scheduler::Rectified).map_err(py_err)?;
    Ok(to_rows(&out))
}

/// Trajectory similarity weight from connection distances.
#[pyfunction]
#[pyo3(signature = (distances, tau = 0.1, mode = "both"))]
fn similarity_weight(distances: Vec<f64>, tau: f64, mode: &str) -> PyResult<f64> {
    Ok(posttrain::similarity_weight(&distances, tau, parse_similarity(mode)?))
}

/// Reward of each sample row under its condition label.
#[pyfunction]
fn reward_values(reward_json: &str, samples: Vec<Vec<f64>>, labels: Vec<Option<usize>>) -> PyResult<Vec<f64>> {
    let reward: RewardSpec = serde_json::from_str(reward_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    reward.validate().map_err(py_err)?;
    reward.reward_values(&to_tensor(&samples)?, &to_conditions(&labels)).map_err(py_err)
}

/// Runs the gradient oracle checks; returns the reports as JSON.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn verify(seed: u64) -> PyResult<String> {
    to_json(&oracle::run_all_checks(seed).map_err(py_err)?)
}

#[pymodule]
fn leapflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVelocityNet>()?;
    m.add_function(wrap_pyfunction!(leap_predict, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_weight, m)?)?;
    m.add_function(wrap_pyfunction!(reward_values, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
