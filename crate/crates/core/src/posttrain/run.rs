use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::model::{Condition, VelocityModel};
use crate::flow::sampling::{sample_batch, standard_normal, SampleSettings};
use crate::flow::scheduler::Scheduler;
use crate::posttrain::config::FineTuneConfig;
use crate::posttrain::methods::{MethodDraws, StepOutput, Trainer};
use crate::posttrain::optim::{ema_update, optimizer_step, AdamWState};
use crate::reward::{compositional_eval, RewardSpec};

/// Held-out evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Evaluate every this many iterations (0 evaluates only before and after).
    pub interval: usize,
    pub steps: usize,
    pub guidance: f64,
    /// Number of condition draws; labels cycle through all conditions.
    pub prompts: usize,
    pub samples_per_prompt: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            interval: 50,
            steps: 50,
            guidance: 3.5,
            prompts: 128,
            samples_per_prompt: 4,
            seed: 1_000_003,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("eval.steps", "must be positive"));
        }
        if self.prompts == 0 || self.samples_per_prompt == 0 {
            return Err(Error::config("eval.prompts", "prompts and samples_per_prompt must be positive"));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::config("eval.guidance", "must be non-negative"));
        }
        Ok(())
    }
}

/// Reward statistics of one model on the held-out evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub reward_mean: f64,
    pub reward_std: f64,
    pub accuracy: Option<f64>,
}

/// Evaluation of the raw and EMA weights at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub raw: EvalStats,
    pub ema: EvalStats,
}

/// One training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub reward_mean: f64,
    pub grad_norm: f64,
    pub w_sim_mean: f64,
    pub k_mean: f64,
    pub j_mean: f64,
}

/// Receives records as the run progresses.
pub trait RunObserver {
    fn on_train(&mut self, _record: &TrainRecord) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _record: &EvalRecord) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

/// Results of a fine-tuning run.
#[derive(Debug, Clone)]
pub struct RunOutput<M> {
    pub train: Vec<TrainRecord>,
    pub evals: Vec<EvalRecord>,
    pub model: M,
    pub ema: M,
    /// Count of each grid index used as a LeapAlign anchor.
    pub anchor_histogram: Vec<u64>,
}

/// Generates the evaluation set: conditions cycling through every label,
/// each repeated `samples_per_prompt` times, and noise from the eval seed.
pub fn eval_inputs(spec: &EvalSpec, num_conditions: usize, dim: usize) -> (Vec<Condition>, Tensor) {
    let conds: Vec<Condition> = (0..spec.prompts)
        .flat_map(|p| std::iter::repeat_n(Condition::Label(p % num_conditions), spec.samples_per_prompt))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = standard_normal(&mut rng, conds.len(), dim);
    (conds, noise)
}

/// Samples the evaluation set with `params` and scores it.
pub fn evaluate(
    model: &dyn VelocityModel,
    params: &[Tensor],
    reward: &RewardSpec,
    spec: &EvalSpec,
) -> Result<EvalStats> {
    let (conds, noise) = eval_inputs(spec, model.num_conditions(), model.latent_dim());
    let settings = SampleSettings { steps: spec.steps, guidance: spec.guidance };
    let samples = sample_batch(model, params, &noise, &conds, settings)?;
    let values = reward.reward_values(&samples, &conds)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let accuracy = match reward.signs() {
        Some(signs) => Some(compositional_eval(signs, &samples, &conds)?),
        None => None,
    };
    Ok(EvalStats { reward_mean: mean, reward_std: var.sqrt(), accuracy })
}

/// Fine-tunes a copy of `model` and returns the per-iteration records, the
/// periodic evaluations and the final raw and EMA weights.
///
/// Evaluations run before the first iteration, every `eval.interval`
/// iterations, and after the last one. Any non-finite loss or gradient
/// aborts the run.
pub fn finetune_run<M: VelocityModel + Clone>(
    model: &M,
    scheduler: &Scheduler,
    cfg: &FineTuneConfig,
    reward: &RewardSpec,
    eval: &EvalSpec,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput<M>> {
    cfg.validate("finetune")?;
    reward.validate()?;
    eval.validate()?;
    let mut current = model.clone();
    let mut ema: Vec<Tensor> = model.detached();
    let mut state = AdamWState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::with_capacity(cfg.iterations);
    let mut evals = Vec::new();
    let mut anchor_histogram = vec![0u64; cfg.steps + 1];

    let pool: Vec<(Vec<Condition>, Tensor)> = {
        let trainer = Trainer::new(&current, cfg, reward, scheduler);
        (0..cfg.train_pool_batches.unwrap_or(0))
            .map(|_| trainer.draw_inputs(cfg.batch, &mut rng))
            .collect()
    };

    let record_eval = |it: usize, m: &M, ema: &[Tensor], evals: &mut Vec<EvalRecord>, obs: &mut dyn RunObserver| -> Result<()> {
        if cfg.iterations == 0 {
            return Ok(());
        }
        let rec = EvalRecord {
            iteration: it,
            raw: evaluate(m, m.params(), reward, eval)?,
            ema: evaluate(m, ema, reward, eval)?,
        };
        obs.on_eval(&rec)?;
        evals.push(rec);
        Ok(())
    };
    record_eval(0, &current, &ema, &mut evals, observer)?;

    for it in 1..=cfg.iterations {
        let (plan, out): (_, StepOutput) = {
            let trainer = Trainer::new(&current, cfg, reward, scheduler);
            let (conds, noise) = if pool.is_empty() {
                trainer.draw_inputs(cfg.batch, &mut rng)
            } else {
                pool[(it - 1) % pool.len()].clone()
            };
            let plan = trainer.plan_batch(&conds, &noise, &mut rng)?;
            let out = trainer.run_plan(&plan).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("iteration {it}: {context}; plan: {plan:?}"),
                },
                other => other,
            })?;
            (plan, out)
        };
        for item in &plan.items {
            if let MethodDraws::Leap { anchors } = &item.draws {
                for &a in &anchors[..anchors.len() - 1] {
                    anchor_histogram[a] += 1;
                }
            }
        }
        optimizer_step(current.params_mut(), &out.grads, &mut state, &cfg.optimizer)?;
        if current.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("iteration {it}: parameters after optimizer step"),
            });
        }
        ema_update(&mut ema, current.params(), cfg.ema_decay)?;
        let d = &out.diagnostics;
        let rec = TrainRecord {
            iteration: it,
            loss: out.loss,
            reward_mean: d.reward_mean,
            grad_norm: d.grad_norm,
            w_sim_mean: d.w_sim_mean,
            k_mean: d.k_mean,
            j_mean: d.j_mean,
        };
        observer.on_train(&rec)?;
        train.push(rec);
        if (eval.interval > 0 && it % eval.interval == 0) || it == cfg.iterations {
            record_eval(it, &current, &ema, &mut evals, observer)?;
        }
    }

    let mut ema_model = current.clone();
    for (dst, src) in ema_model.params_mut().iter_mut().zip(ema) {
        *dst = src;
    }
    Ok(RunOutput {
        train,
        evals,
        model: current,
        ema: ema_model,
        anchor_histogram,
    })
}
