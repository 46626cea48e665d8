use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::model::{Condition, VelocityModel};

/// Guided velocity `v_u + scale·(v_c − v_u)`.
///
/// At `scale == 1` only the conditional branch is evaluated and at
/// `scale == 0` only the unconditional one, so both identities hold bitwise.
pub fn cfg_velocity(
    model: &dyn VelocityModel,
    tape: &Tape,
    params: &[Tensor],
    x: &Tensor,
    ts: &[f64],
    conds: &[Condition],
    scale: f64,
) -> Result<Tensor> {
    if !(scale >= 0.0) {
        return Err(Error::config("guidance_scale", "must be non-negative"));
    }
    if scale == 1.0 {
        return model.velocity(tape, params, x, ts, conds);
    }
    let nulls = vec![Condition::Null; conds.len()];
    let v_u = model.velocity(tape, params, x, ts, &nulls)?;
    if scale == 0.0 {
        for &c in conds {
            model.check_condition(c)?;
        }
        return Ok(v_u);
    }
    let v_c = model.velocity(tape, params, x, ts, conds)?;
    tape.add(&v_u, &tape.scale(&tape.sub(&v_c, &v_u)?, scale)?)
}

/// Uniform grid `t_i = i / steps`, `i = 0..=steps`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Standard-normal starting latent `[1, dim]` drawn from a seed.
pub fn noise_from_seed(seed: u64, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal(&mut rng, 1, dim)
}

pub fn standard_normal(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("rows and cols are positive")
}

/// How a single Euler step interacts with the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepMode {
    /// Nothing recorded; the next latent is a detached constant.
    #[default]
    Off,
    /// The velocity and the step are recorded, the velocity seeing the
    /// incoming latent with its gradient path intact.
    Record,
    /// The velocity is recorded but its latent input is detached; the step
    /// itself keeps the incoming latent's gradient path.
    RecordDetachedInput,
    /// The velocity is evaluated without recording; the step keeps the
    /// incoming latent's gradient path.
    ChainOnly,
}

/// Guided Euler rollout on the uniform grid.
///
/// `latents[i]` is the latent at `t_i` (so `latents[steps]` is the starting
/// noise and `latents[0]` the sample) and `velocities[i - 1]` is the guided
/// velocity evaluated at `t_i`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: usize,
    pub timesteps: Vec<f64>,
    pub latents: Vec<Tensor>,
    pub velocities: Vec<Tensor>,
    pub condition: Condition,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn sample(&self) -> &Tensor {
        &self.latents[0]
    }

    pub fn velocity_at(&self, i: usize) -> &Tensor {
        &self.velocities[i - 1]
    }

    /// Step width between grid points `i − 1` and `i`.
    pub fn dt(&self, i: usize) -> f64 {
        self.timesteps[i] - self.timesteps[i - 1]
    }

    /// Checks the Euler recurrence bitwise at every step.
    pub fn is_euler_consistent(&self) -> bool {
        (1..=self.steps).all(|i| {
            let dt = self.dt(i);
            let x = self.latents[i].data();
            let v = self.velocities[i - 1].data();
            self.latents[i - 1]
                .data()
                .iter()
                .zip(x.iter().zip(v))
                .all(|(&prev, (&xi, &vi))| prev.to_bits() == (xi - vi * dt).to_bits())
        })
    }

    /// Little-endian dump of every latent and velocity value.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.latents
            .iter()
            .chain(&self.velocities)
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Sampling controls shared by rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSettings {
    pub steps: usize,
    pub guidance: f64,
}

/// Runs the guided Euler sampler from `x1` (a `[1, D]` row) at `t = 1`
/// down to `t = 0`.
///
/// `modes[i - 1]` controls the step out of grid point `i`; an empty slice
/// means every step is [`StepMode::Off`]. With every step off no tape nodes
/// are created.
pub fn sample_trajectory(
    model: &dyn VelocityModel,
    tape: &Tape,
    params: &[Tensor],
    condition: Condition,
    x1: Tensor,
    settings: SampleSettings,
    modes: &[StepMode],
) -> Result<Trajectory> {
    let steps = settings.steps;
    if steps == 0 {
        return Err(Error::config("steps", "need at least one sampling step"));
    }
    if !modes.is_empty() && modes.len() != steps {
        return Err(Error::config("steps", "one step mode per sampling step is required"));
    }
    let timesteps = time_grid(steps);
    let mut latents = vec![Tensor::scalar(0.0); steps + 1];
    let mut velocities = vec![Tensor::scalar(0.0); steps];
    latents[steps] = x1;
    for i in (1..=steps).rev() {
        let mode = modes.get(i - 1).copied().unwrap_or_default();
        let t = [timesteps[i]];
        let dt = timesteps[i] - timesteps[i - 1];
        let x = &latents[i];
        let guided = |input: &Tensor, record: bool| {
            tape.with_recording(record, || {
                cfg_velocity(model, tape, params, input, &t, &[condition], settings.guidance)
            })
        };
        let (v, next) = match mode {
            StepMode::Off => tape.no_grad(|| -> Result<_> {
                let v = guided(&x.detach(), false)?;
                let next = tape.sub(&x.detach(), &tape.scale(&v, dt)?)?;
                Ok((v, next))
            })?,
            StepMode::Record => {
                let v = guided(x, true)?;
                let next = tape.sub(x, &tape.scale(&v, dt)?)?;
                (v, next)
            }
            StepMode::RecordDetachedInput => {
                let v = guided(&tape.stop_gradient(x), true)?;
                let next = tape.sub(x, &tape.scale(&v, dt)?)?;
                (v, next)
            }
            StepMode::ChainOnly => {
                let v = guided(&x.detach(), false)?;
                let next = tape.sub(x, &tape.scale(&v, dt)?)?;
                (v, next)
            }
        };
        velocities[i - 1] = v;
        latents[i - 1] = next;
    }
    Ok(Trajectory {
        steps,
        timesteps,
        latents,
        velocities,
        condition,
        seed: None,
    })
}

/// [`sample_trajectory`] starting from noise drawn from `seed`, nothing recorded.
pub fn sample_trajectory_seeded(
    model: &dyn VelocityModel,
    condition: Condition,
    settings: SampleSettings,
    seed: u64,
) -> Result<Trajectory> {
    let tape = Tape::inert();
    let x1 = noise_from_seed(seed, model.latent_dim());
    let mut traj = sample_trajectory(model, &tape, model.params(), condition, x1, settings, &[])?;
    traj.seed = Some(seed);
    Ok(traj)
}

/// Batched guided Euler sampling without any recording; rows of `x1` are
/// independent samples. Returns the final latents `[B, D]`.
pub fn sample_batch(
    model: &dyn VelocityModel,
    params: &[Tensor],
    x1: &Tensor,
    conds: &[Condition],
    settings: SampleSettings,
) -> Result<Tensor> {
    if settings.steps == 0 {
        return Err(Error::config("steps", "need at least one sampling step"));
    }
    let tape = Tape::inert();
    let params: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    let grid = time_grid(settings.steps);
    let rows = x1.rows();
    let mut x = x1.detach();
    for i in (1..=settings.steps).rev() {
        let ts = vec![grid[i]; rows];
        let v = cfg_velocity(model, &tape, &params, &x, &ts, conds, settings.guidance)?;
        x = tape.sub(&x, &tape.scale(&v, grid[i] - grid[i - 1])?)?;
    }
    Ok(x)
}
