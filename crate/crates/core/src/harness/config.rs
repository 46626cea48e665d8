use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::data::MixtureSpec;
use crate::flow::model::{Activation, NetSpec};
use crate::flow::pretrain::PretrainConfig;
use crate::posttrain::config::FineTuneConfig;
use crate::posttrain::run::EvalSpec;
use crate::reward::RewardSpec;

/// Training distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    GaussianMixture(MixtureSpec),
}

impl DataSpec {
    pub fn mixture(&self) -> &MixtureSpec {
        match self {
            DataSpec::GaussianMixture(m) => m,
        }
    }
}

/// Velocity network layout; latent size and condition count come from the
/// data section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// A complete experiment: data, model, pretraining, fine-tuning, reward and
/// evaluation settings plus where to write artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FineTuneConfig,
    pub reward: RewardSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn path_error<E: std::fmt::Display>(err: serde_path_to_error::Error<E>) -> Error {
    let path = err.path().to_string();
    let message = err.inner().to_string();
    let message = message.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid value").trim().to_string();
    if path == "." {
        Error::Parse(message)
    } else {
        Error::config(path, message)
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(path_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates an already-parsed document.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(table).map_err(path_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let safe = |c: char| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.');
        if self.run_id.is_empty() || self.run_id.starts_with('.') || !self.run_id.chars().all(safe) {
            return Err(Error::config(
                "run_id",
                "run_id must be non-empty, use only letters, digits, '-', '_' or '.', and not start with '.'",
            ));
        }
        let data = self.data.mixture();
        data.validate()?;
        self.net_spec().validate()?;
        self.pretrain.validate()?;
        self.finetune.validate("finetune")?;
        self.reward.validate()?;
        if self.reward.dim() != data.dim() {
            return Err(Error::config(
                "reward",
                format!("reward acts on {} dimensions but the data has {}", self.reward.dim(), data.dim()),
            ));
        }
        if let Some(c) = self.reward.num_conditions() {
            if c != data.num_conditions() {
                return Err(Error::config(
                    "reward",
                    format!("reward defines {c} conditions but the data has {}", data.num_conditions()),
                ));
            }
        }
        self.eval.validate()
    }

    pub fn net_spec(&self) -> NetSpec {
        let data = self.data.mixture();
        NetSpec {
            latent_dim: data.dim(),
            num_conditions: data.num_conditions(),
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
        }
    }

    /// Directory holding this run's artifacts.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    /// The configuration with every default written out.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Parses a TOML document into a generic table without validating it.
pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Parse(e.to_string()))
}

/// Reads a command-line value as TOML (`0.3`, `true`, `[0, 0.5]`,
/// `"refl"`), falling back to a bare string.
pub fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Sets a dotted key. A bare key without a section addresses `finetune`.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let full = if key.contains('.') || matches!(key, "run_id" | "out_dir") {
        key.to_string()
    } else {
        format!("finetune.{key}")
    };
    let mut parts: Vec<&str> = full.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(full.clone(), format!("`{part}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
