use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::data::MixtureSpec;
use crate::flow::model::{Condition, VelocityModel};
use crate::flow::sampling::standard_normal;
use crate::flow::scheduler::Scheduler;
use crate::posttrain::optim::{optimizer_step, AdamWConfig, AdamWState};

/// Flow-matching regression loss for a batch of clean points `x0` (`[B, D]`).
///
/// Draws `t ~ U[0, 1]` and `x1 ~ N(0, I)` per row, forms
/// `x_t = α_t x0 + β_t x1` and regresses the model onto
/// `α̇_t x0 + β̇_t x1` (which is `x1 − x0` for the rectified schedule).
/// Returns the mean squared error over rows and coordinates.
pub fn fm_pretrain_loss(
    model: &dyn VelocityModel,
    tape: &Tape,
    params: &[Tensor],
    x0: &Tensor,
    conds: &[Condition],
    scheduler: &Scheduler,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (rows, dim) = (x0.rows(), x0.cols());
    let ts: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
    let x1 = standard_normal(rng, rows, dim);
    fm_loss_at(model, tape, params, x0, &x1, &ts, conds, scheduler)
}

/// [`fm_pretrain_loss`] with explicit noise and times.
#[allow(clippy::too_many_arguments)]
pub fn fm_loss_at(
    model: &dyn VelocityModel,
    tape: &Tape,
    params: &[Tensor],
    x0: &Tensor,
    x1: &Tensor,
    ts: &[f64],
    conds: &[Condition],
    scheduler: &Scheduler,
) -> Result<Tensor> {
    if x0.shape() != x1.shape() || ts.len() != x0.rows() {
        return Err(Error::ShapeMismatch {
            op: "fm_loss",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    let dim = x0.cols();
    let mut xt = Vec::with_capacity(x0.len());
    let mut target = Vec::with_capacity(x0.len());
    for (r, &t) in ts.iter().enumerate() {
        let p = scheduler.eval(t)?;
        for c in 0..dim {
            let (a, b) = (x0.data()[r * dim + c], x1.data()[r * dim + c]);
            xt.push(p.alpha * a + p.beta * b);
            target.push(p.d_alpha * a + p.d_beta * b);
        }
    }
    let xt = Tensor::matrix(x0.rows(), dim, xt)?;
    let target = Tensor::matrix(x0.rows(), dim, target)?;
    let v = model.velocity(tape, params, &xt, ts, conds)?;
    tape.mean(&tape.square(&tape.sub(&v, &target)?)?)
}

/// Pretraining loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing a condition by the null condition.
    pub cond_drop: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch: 64,
            lr: 2e-3,
            cond_drop: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("pretrain.batch", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::config("pretrain.cond_drop", "must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Trains `model` on `data` with AdamW (no weight decay); returns the loss
/// at every iteration and the final RNG so callers can persist its position.
pub fn pretrain(
    model: &mut dyn VelocityModel,
    data: &MixtureSpec,
    cfg: &PretrainConfig,
    scheduler: &Scheduler,
) -> Result<(Vec<f64>, ChaCha8Rng)> {
    cfg.validate()?;
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hyper = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut state = AdamWState::new(model.params());
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (x0, mut conds) = data.sample(&mut rng, cfg.batch);
        for c in conds.iter_mut() {
            if rng.random::<f64>() < cfg.cond_drop {
                *c = Condition::Null;
            }
        }
        let tape = Tape::new();
        let params = model.bind(&tape);
        let loss = fm_pretrain_loss(&*model, &tape, &params, &x0, &conds, scheduler, &mut rng)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite {
                context: format!("pretraining loss at iteration {it}"),
            });
        }
        let grads = tape.backward(&loss)?.collect(&params);
        optimizer_step(model.params_mut(), &grads, &mut state, &hyper)?;
        losses.push(loss.item());
    }
    Ok((losses, rng))
}
