use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posttrain::optim::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Leapalign,
    Refl,
    DraftLv,
    Drtune,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Leapalign, Method::Refl, Method::DraftLv, Method::Drtune];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Leapalign => "leapalign",
            Method::Refl => "refl",
            Method::DraftLv => "draft_lv",
            Method::Drtune => "drtune",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}` (expected leapalign, refl, draft_lv or drtune)")))
    }
}

/// How leap anchors are drawn from the sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Random,
    FixedDistance,
}

/// Which latent the reward is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardInput {
    /// The connected final latent, forward-equal to the rollout sample.
    #[default]
    X0,
    /// The last one-step leap prediction.
    Xhat0,
}

/// Which connection distances enter the similarity weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    #[default]
    Both,
    DjOnly,
    D0Only,
    None,
}

/// Fine-tuning hyperparameters shared by all four methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub method: Method,
    /// Discount applied to the latent input of every velocity after the first.
    pub alpha: f64,
    /// Hinge threshold; `None` uses the reward's default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Floor for each connection distance in the similarity weight.
    pub tau: f64,
    pub leap_steps: usize,
    pub t_range: [f64; 2],
    pub selection: Selection,
    /// Anchor spacing (as a fraction of the unit time interval) for
    /// [`Selection::FixedDistance`].
    pub distance: f64,
    pub reward_input: RewardInput,
    pub similarity: SimilarityMode,
    /// Detach the leading latent of every leap after the first.
    pub nested_only: bool,
    /// Early-stop window for ReFL and DRTune.
    pub early_stop_window: usize,
    /// Number of training timesteps for DRTune.
    pub train_timesteps: usize,
    /// Number of re-noising passes for DRaFT-LV.
    pub renoise_steps: usize,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    pub batch: usize,
    pub iterations: usize,
    /// Rollout steps.
    pub steps: usize,
    pub guidance: f64,
    /// When set, conditions and starting noise cycle through this many
    /// pre-drawn batches instead of being drawn afresh every iteration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_pool_batches: Option<usize>,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            method: Method::Leapalign,
            alpha: 0.3,
            lambda: None,
            tau: 0.1,
            leap_steps: 2,
            t_range: [0.0, 1.0],
            selection: Selection::Random,
            distance: 0.5,
            reward_input: RewardInput::X0,
            similarity: SimilarityMode::Both,
            nested_only: false,
            early_stop_window: 11,
            train_timesteps: 2,
            renoise_steps: 2,
            optimizer: AdamWConfig::default(),
            ema_decay: 0.995,
            batch: 64,
            iterations: 300,
            steps: 25,
            guidance: 3.5,
            train_pool_batches: None,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    /// Checks every invariant, reporting the offending field under `path`.
    pub fn validate(&self, path: &str) -> Result<()> {
        let field = |name: &str| format!("{path}.{name}");
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(field("alpha"), "alpha must lie in [0,1]"));
        }
        if let Some(l) = self.lambda {
            if l.is_nan() {
                return Err(Error::config(field("lambda"), "lambda must not be NaN"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(field("tau"), "tau must be positive"));
        }
        if !(1..=3).contains(&self.leap_steps) {
            return Err(Error::config(field("leap_steps"), "leap_steps must be 1, 2 or 3"));
        }
        let [lo, hi] = self.t_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::config(field("t_range"), "t_range must satisfy 0 <= lo < hi <= 1"));
        }
        if !(self.distance > 0.0 && self.distance < 1.0) {
            return Err(Error::config(field("distance"), "distance must lie in (0,1)"));
        }
        if self.similarity == SimilarityMode::DjOnly && self.leap_steps == 1 {
            return Err(Error::config(
                field("similarity"),
                "dj_only needs an intermediate anchor (leap_steps >= 2)",
            ));
        }
        if self.steps == 0 {
            return Err(Error::config(field("steps"), "steps must be positive"));
        }
        if self.early_stop_window == 0 || self.early_stop_window > self.steps {
            return Err(Error::config(field("early_stop_window"), "early_stop_window must lie in [1, steps]"));
        }
        if self.train_timesteps == 0 || self.train_timesteps > self.steps {
            return Err(Error::config(field("train_timesteps"), "train_timesteps must lie in [1, steps]"));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::config(field("guidance"), "guidance must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config(field("ema_decay"), "ema_decay must lie in [0,1]"));
        }
        if self.batch == 0 {
            return Err(Error::config(field("batch"), "batch must be positive"));
        }
        if self.train_pool_batches == Some(0) {
            return Err(Error::config(field("train_pool_batches"), "train_pool_batches must be positive"));
        }
        self.optimizer.validate(&field("optimizer"))
    }
}
