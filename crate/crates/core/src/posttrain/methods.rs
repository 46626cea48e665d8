use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{global_norm, GradientMap, Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::leap::{leap_predict, noise_interpolate};
use crate::flow::model::{Condition, VelocityModel};
use crate::flow::sampling::{cfg_velocity, sample_trajectory, standard_normal, SampleSettings, StepMode, Trajectory};
use crate::flow::scheduler::Scheduler;
use crate::posttrain::anchors::select_anchors;
use crate::posttrain::config::{FineTuneConfig, Method, RewardInput};
use crate::posttrain::leap_trajectory::{build_leap_trajectory, similarity_weight, ChainOptions};
use crate::reward::{hinge_loss, RewardSpec};

/// Random choices of one method for one batch item.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodDraws {
    /// Descending grid anchors ending at 0.
    Leap { anchors: Vec<usize> },
    /// Early-stop grid index.
    Refl { t_min: usize },
    /// Noise for each re-noising pass.
    DraftLv { renoise: Vec<Tensor> },
    /// First training index and early-stop grid index.
    Drtune { s: usize, t_min: usize },
}

/// Everything random about one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemPlan {
    pub condition: Condition,
    pub noise: Tensor,
    pub draws: MethodDraws,
}

/// A frozen batch: re-running it reproduces the step exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub items: Vec<ItemPlan>,
    /// Replaces the computed similarity weight of every item when set.
    pub weight_override: Option<f64>,
}

/// Per-item results of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemOutput {
    pub loss: f64,
    pub grads: GradientMap,
    /// Reward of the rollout sample.
    pub reward: f64,
    pub weight: f64,
    /// Time of the first recorded step.
    pub k: f64,
    /// Time of the second anchor, or 0 for single-leap methods.
    pub j: f64,
}

/// Batch-averaged results of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: GradientMap,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub reward_mean: f64,
    pub w_sim_mean: f64,
    pub grad_norm: f64,
    pub k_mean: f64,
    pub j_mean: f64,
    pub anchors: Vec<Vec<usize>>,
}

/// DRTune training indices `{s + i·⌊T/K⌋ : i = 0..K}`.
pub fn drtune_train_steps(steps: usize, k: usize, s: usize) -> Vec<usize> {
    let stride = steps / k;
    (0..k).map(|i| s + i * stride).collect()
}

/// Upper bound of DRTune's first training index, `T − (K−1)·⌊T/K⌋`.
pub fn drtune_start_max(steps: usize, k: usize) -> usize {
    steps - (k - 1) * (steps / k)
}

/// Model, objective and configuration for fine-tuning steps.
pub struct Trainer<'a> {
    pub model: &'a dyn VelocityModel,
    pub cfg: &'a FineTuneConfig,
    pub reward: &'a RewardSpec,
    pub scheduler: &'a Scheduler,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a dyn VelocityModel, cfg: &'a FineTuneConfig, reward: &'a RewardSpec, scheduler: &'a Scheduler) -> Self {
        Self { model, cfg, reward, scheduler }
    }

    pub fn lambda(&self) -> f64 {
        self.cfg.lambda.unwrap_or_else(|| self.reward.default_lambda())
    }

    fn settings(&self) -> SampleSettings {
        SampleSettings { steps: self.cfg.steps, guidance: self.cfg.guidance }
    }

    /// Draws method randomness for a batch with the given conditions and
    /// starting noise (`[B, D]`). Anchors are drawn per item; the baselines'
    /// early-stop and training indices are drawn once per batch.
    pub fn plan_batch(&self, conditions: &[Condition], noise: &Tensor, rng: &mut impl Rng) -> Result<BatchPlan> {
        let cfg = self.cfg;
        let steps = cfg.steps;
        let shared = match cfg.method {
            Method::Refl => Some(MethodDraws::Refl { t_min: rng.random_range(1..=cfg.early_stop_window) }),
            Method::Drtune => {
                let s = rng.random_range(1..=drtune_start_max(steps, cfg.train_timesteps));
                let t_min = rng.random_range(1..=cfg.early_stop_window);
                Some(MethodDraws::Drtune { s, t_min })
            }
            _ => None,
        };
        let mut items = Vec::with_capacity(conditions.len());
        for (i, &condition) in conditions.iter().enumerate() {
            let draws = match (cfg.method, &shared) {
                (_, Some(d)) => d.clone(),
                (Method::Leapalign, None) => MethodDraws::Leap { anchors: select_anchors(cfg, steps, rng)? },
                (Method::DraftLv, None) => MethodDraws::DraftLv {
                    renoise: (0..cfg.renoise_steps)
                        .map(|_| standard_normal(rng, 1, self.model.latent_dim()))
                        .collect(),
                },
                _ => unreachable!("baselines with shared draws are handled above"),
            };
            items.push(ItemPlan { condition, noise: noise.row_at(i), draws });
        }
        Ok(BatchPlan { items, weight_override: None })
    }

    /// Uniform conditions and standard-normal noise for a fresh batch.
    pub fn draw_inputs(&self, batch: usize, rng: &mut impl Rng) -> (Vec<Condition>, Tensor) {
        let c = self.model.num_conditions();
        let conds = (0..batch).map(|_| Condition::Label(rng.random_range(0..c))).collect();
        (conds, standard_normal(rng, batch, self.model.latent_dim()))
    }

    /// Runs a frozen plan with per-item tapes in parallel and averages the
    /// results in item order.
    pub fn run_plan(&self, plan: &BatchPlan) -> Result<StepOutput> {
        let outputs: Vec<Result<ItemOutput>> = plan
            .items
            .par_iter()
            .map(|item| self.run_item(item, plan.weight_override))
            .collect();
        let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
        let n = outputs.len() as f64;
        let mut grads: GradientMap = self.model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        for out in &outputs {
            for (acc, g) in grads.iter_mut().zip(&out.grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        for g in grads.iter_mut().flatten() {
            *g /= n;
        }
        let mean = |f: fn(&ItemOutput) -> f64| outputs.iter().map(f).sum::<f64>() / n;
        let loss = mean(|o| o.loss);
        let diagnostics = StepDiagnostics {
            reward_mean: mean(|o| o.reward),
            w_sim_mean: mean(|o| o.weight),
            grad_norm: global_norm(&grads),
            k_mean: mean(|o| o.k),
            j_mean: mean(|o| o.j),
            anchors: plan
                .items
                .iter()
                .filter_map(|i| match &i.draws {
                    MethodDraws::Leap { anchors } => Some(anchors.clone()),
                    _ => None,
                })
                .collect(),
        };
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{} step: loss {loss}, grad norm {}", self.cfg.method.name(), diagnostics.grad_norm),
            });
        }
        Ok(StepOutput { loss, grads, diagnostics })
    }

    fn rollout(&self, item: &ItemPlan) -> Result<Trajectory> {
        sample_trajectory(
            self.model,
            &Tape::inert(),
            self.model.params(),
            item.condition,
            item.noise.clone(),
            self.settings(),
            &[],
        )
    }

    fn finish(&self, tape: &Tape, params: &[Tensor], loss: &Tensor, context: impl Fn() -> String) -> Result<GradientMap> {
        if !loss.item().is_finite() {
            return Err(Error::NonFinite { context: context() });
        }
        Ok(tape.backward(loss)?.collect(params))
    }

    /// Loss and gradient of one item on its own tape.
    pub fn run_item(&self, item: &ItemPlan, weight_override: Option<f64>) -> Result<ItemOutput> {
        let traj = self.rollout(item)?;
        let sample_reward = self.reward.reward(&Tape::inert(), traj.sample(), item.condition)?.item();
        let tape = Tape::new();
        let params = self.model.bind(&tape);
        let lambda = self.lambda();
        let steps = self.cfg.steps;
        let t = |i: usize| traj.timesteps[i];
        match &item.draws {
            MethodDraws::Leap { anchors } => {
                let opts = ChainOptions {
                    alpha: self.cfg.alpha,
                    nested_only: self.cfg.nested_only,
                    guidance: self.cfg.guidance,
                };
                let lt = build_leap_trajectory(self.model, &tape, &params, &traj, anchors, opts, self.scheduler)?;
                let target = match self.cfg.reward_input {
                    RewardInput::X0 => lt.final_latent(),
                    RewardInput::Xhat0 => lt.final_prediction(),
                };
                let r = self.reward.reward(&tape, target, item.condition)?;
                let weight = weight_override
                    .unwrap_or_else(|| similarity_weight(&lt.distances, self.cfg.tau, self.cfg.similarity));
                let loss = tape.scale(&hinge_loss(&tape, &r, lambda)?, weight)?;
                let grads = self.finish(&tape, &params, &loss, || {
                    format!(
                        "leapalign item: anchors {anchors:?}, latents {:?}, distances {:?}",
                        lt.real.iter().map(|x| x.data().to_vec()).collect::<Vec<_>>(),
                        lt.distances
                    )
                })?;
                let (k, j) = if anchors.len() > 2 { (t(anchors[0]), t(anchors[1])) } else { (t(anchors[0]), 0.0) };
                Ok(ItemOutput { loss: loss.item(), grads, reward: sample_reward, weight, k, j })
            }
            MethodDraws::Refl { t_min } => {
                let x = traj.latents[*t_min].detach();
                let v = cfg_velocity(self.model, &tape, &params, &x, &[t(*t_min)], &[item.condition], self.cfg.guidance)?;
                let x0_hat = leap_predict(&tape, &x, t(*t_min), 0.0, &v, self.scheduler)?;
                let r = self.reward.reward(&tape, &x0_hat, item.condition)?;
                let loss = hinge_loss(&tape, &r, lambda)?;
                let grads = self.finish(&tape, &params, &loss, || {
                    format!("refl item: t_min {t_min}, latent {:?}", x.data())
                })?;
                Ok(ItemOutput { loss: loss.item(), grads, reward: sample_reward, weight: 1.0, k: t(*t_min), j: 0.0 })
            }
            MethodDraws::DraftLv { renoise } => {
                let x1 = traj.latents[1].detach();
                let dt = traj.dt(1);
                let v = cfg_velocity(self.model, &tape, &params, &x1, &[t(1)], &[item.condition], self.cfg.guidance)?;
                let x0 = tape.sub(&x1, &tape.scale(&v, dt)?)?;
                let r = self.reward.reward(&tape, &x0, item.condition)?;
                let mut loss = hinge_loss(&tape, &r, lambda)?;
                for eps in renoise {
                    let xi = noise_interpolate(&tape, &tape.stop_gradient(&x0), eps, t(1), self.scheduler)?;
                    let vi = cfg_velocity(self.model, &tape, &params, &xi, &[t(1)], &[item.condition], self.cfg.guidance)?;
                    let x0i = tape.sub(&xi, &tape.scale(&vi, dt)?)?;
                    let ri = self.reward.reward(&tape, &x0i, item.condition)?;
                    loss = tape.add(&loss, &hinge_loss(&tape, &ri, lambda)?)?;
                }
                let grads = self.finish(&tape, &params, &loss, || {
                    format!("draft_lv item: last latent {:?}", x1.data())
                })?;
                Ok(ItemOutput { loss: loss.item(), grads, reward: sample_reward, weight: 1.0, k: t(1), j: 0.0 })
            }
            MethodDraws::Drtune { s, t_min } => {
                let train = drtune_train_steps(steps, self.cfg.train_timesteps, *s);
                let modes: Vec<StepMode> = (1..=steps)
                    .map(|i| {
                        if i < *t_min {
                            StepMode::Off
                        } else if train.contains(&i) {
                            StepMode::RecordDetachedInput
                        } else {
                            StepMode::ChainOnly
                        }
                    })
                    .collect();
                let rec = sample_trajectory(
                    self.model,
                    &tape,
                    &params,
                    item.condition,
                    item.noise.clone(),
                    self.settings(),
                    &modes,
                )?;
                // The chain stops at t_min; the remaining steps only feed the
                // reported sample reward.
                let x_t = &rec.latents[*t_min];
                let v_t = rec.velocity_at(*t_min);
                let x0_hat = leap_predict(&tape, x_t, t(*t_min), 0.0, v_t, self.scheduler)?;
                let r = self.reward.reward(&tape, &x0_hat, item.condition)?;
                let loss = hinge_loss(&tape, &r, lambda)?;
                let grads = self.finish(&tape, &params, &loss, || {
                    format!("drtune item: s {s}, t_min {t_min}, latent {:?}", x_t.data())
                })?;
                Ok(ItemOutput { loss: loss.item(), grads, reward: sample_reward, weight: 1.0, k: t(*t_min), j: 0.0 })
            }
        }
    }

    /// Draws a fresh batch and runs it.
    pub fn step(&self, rng: &mut impl Rng) -> Result<(BatchPlan, StepOutput)> {
        let (conds, noise) = self.draw_inputs(self.cfg.batch, rng);
        let plan = self.plan_batch(&conds, &noise, rng)?;
        let out = self.run_plan(&plan)?;
        Ok((plan, out))
    }
}

fn step_for(
    method: Method,
    model: &dyn VelocityModel,
    cfg: &FineTuneConfig,
    reward: &RewardSpec,
    conditions: &[Condition],
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    if cfg.method != method {
        return Err(Error::config("finetune.method", format!("expected method {}", method.name())));
    }
    let scheduler = Scheduler::Rectified;
    let trainer = Trainer::new(model, cfg, reward, &scheduler);
    let noise = standard_normal(rng, conditions.len(), model.latent_dim());
    let plan = trainer.plan_batch(conditions, &noise, rng)?;
    trainer.run_plan(&plan)
}

/// One LeapAlign step on the given conditions with fresh noise.
pub fn leapalign_step(
    model: &dyn VelocityModel,
    cfg: &FineTuneConfig,
    reward: &RewardSpec,
    conditions: &[Condition],
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    step_for(Method::Leapalign, model, cfg, reward, conditions, rng)
}

/// One ReFL step on the given conditions with fresh noise.
pub fn refl_step(
    model: &dyn VelocityModel,
    cfg: &FineTuneConfig,
    reward: &RewardSpec,
    conditions: &[Condition],
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    step_for(Method::Refl, model, cfg, reward, conditions, rng)
}

/// One DRaFT-LV step on the given conditions with fresh noise.
pub fn draftlv_step(
    model: &dyn VelocityModel,
    cfg: &FineTuneConfig,
    reward: &RewardSpec,
    conditions: &[Condition],
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    step_for(Method::DraftLv, model, cfg, reward, conditions, rng)
}

/// One DRTune step on the given conditions with fresh noise.
pub fn drtune_step(
    model: &dyn VelocityModel,
    cfg: &FineTuneConfig,
    reward: &RewardSpec,
    conditions: &[Condition],
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    step_for(Method::Drtune, model, cfg, reward, conditions, rng)
}
