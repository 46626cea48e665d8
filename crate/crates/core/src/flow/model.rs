use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Number of timestep features: raw `t` plus sin/cos at four frequencies.
pub const TIME_FEATURES: usize = 9;

const TIME_FREQUENCIES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

/// Conditioning label; `Null` is the reserved unconditional slot used by
/// classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Label(usize),
    Null,
}

impl Condition {
    pub fn label(&self) -> Option<usize> {
        match self {
            Condition::Label(c) => Some(*c),
            Condition::Null => None,
        }
    }
}

/// Timestep embedding `[t, sin(πωt), cos(πωt) for ω in 1,2,4,8]`.
pub fn time_embedding(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    out[0] = t;
    for (i, w) in TIME_FREQUENCIES.iter().enumerate() {
        let (s, c) = (std::f64::consts::PI * w * t).sin_cos();
        out[1 + 2 * i] = s;
        out[2 + 2 * i] = c;
    }
    out
}

/// A parametric velocity field `v_θ(x, t, c)`.
///
/// `params` is passed explicitly so the same model can be evaluated with
/// tape-bound leaves, with detached values, or with perturbed copies for
/// finite differences. Inputs are batched by rows: `x` is `[B, D]`, and
/// `ts` and `conds` have length `B`.
pub trait VelocityModel: Send + Sync {
    fn latent_dim(&self) -> usize;

    fn num_conditions(&self) -> usize;

    fn params(&self) -> &[Tensor];

    fn params_mut(&mut self) -> &mut [Tensor];

    fn velocity(
        &self,
        tape: &Tape,
        params: &[Tensor],
        x: &Tensor,
        ts: &[f64],
        conds: &[Condition],
    ) -> Result<Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    fn bind(&self, tape: &Tape) -> Vec<Tensor> {
        self.params().iter().map(|p| tape.leaf(p)).collect()
    }

    /// Detached parameter values.
    fn detached(&self) -> Vec<Tensor> {
        self.params().iter().map(Tensor::detach).collect()
    }

    fn check_condition(&self, c: Condition) -> Result<()> {
        match c {
            Condition::Label(label) if label >= self.num_conditions() => Err(Error::UnknownCondition {
                label,
                count: self.num_conditions(),
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// Layer layout of a [`VelocityNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub latent_dim: usize,
    pub num_conditions: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}

impl NetSpec {
    pub fn new(latent_dim: usize, num_conditions: usize, hidden: Vec<usize>) -> Self {
        Self {
            latent_dim,
            num_conditions,
            hidden,
            activation: Activation::Tanh,
        }
    }

    /// Input width: latent, timestep features, one-hot condition plus null slot.
    pub fn input_width(&self) -> usize {
        self.latent_dim + TIME_FEATURES + self.num_conditions + 1
    }

    /// Full width list from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(self.latent_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("model.latent_dim", "must be positive"));
        }
        if self.num_conditions == 0 {
            return Err(Error::config("model.num_conditions", "must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Multilayer perceptron velocity field over `[x, time features, condition]`.
///
/// Parameters alternate weight `[in, out]` and bias `[1, out]` per layer. An
/// empty `hidden` list gives a model that is affine in both `x` and `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    spec: NetSpec,
    params: Vec<Tensor>,
}

impl VelocityNet {
    /// Xavier-uniform weights, zero biases.
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = spec.widths();
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            params.push(Tensor::matrix(fan_in, fan_out, w)?);
            params.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: NetSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        if params.len() != 2 * (widths.len() - 1) {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                2 * (widths.len() - 1),
                params.len()
            )));
        }
        for (l, pair) in widths.windows(2).enumerate() {
            if params[2 * l].shape() != [pair[0], pair[1]] || params[2 * l + 1].shape() != [1, pair[1]] {
                return Err(Error::Checkpoint(format!("layer {l} has mismatched parameter shapes")));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    /// Builds the constant part of the input: timestep features and one-hot
    /// condition per row.
    fn features(&self, rows: usize, ts: &[f64], conds: &[Condition]) -> Result<Tensor> {
        let c = self.spec.num_conditions;
        let width = TIME_FEATURES + c + 1;
        let mut data = Vec::with_capacity(rows * width);
        for (&t, &cond) in ts.iter().zip(conds) {
            self.check_condition(cond)?;
            data.extend_from_slice(&time_embedding(t));
            let mut onehot = vec![0.0; c + 1];
            onehot[cond.label().unwrap_or(c)] = 1.0;
            data.extend(onehot);
        }
        Tensor::matrix(rows, width, data)
    }
}

impl VelocityModel for VelocityNet {
    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn num_conditions(&self) -> usize {
        self.spec.num_conditions
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn velocity(
        &self,
        tape: &Tape,
        params: &[Tensor],
        x: &Tensor,
        ts: &[f64],
        conds: &[Condition],
    ) -> Result<Tensor> {
        let rows = x.rows();
        if x.shape().len() != 2 || x.cols() != self.spec.latent_dim || ts.len() != rows || conds.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "velocity",
                lhs: x.shape().to_vec(),
                rhs: vec![ts.len(), conds.len(), self.spec.latent_dim],
            });
        }
        let features = self.features(rows, ts, conds)?;
        let ones = Tensor::full(&[rows, 1], 1.0);
        let mut h = tape.concat(&[x, &features], 1)?;
        let layers = params.len() / 2;
        for l in 0..layers {
            let z = tape.matmul(&h, &params[2 * l])?;
            let bias = tape.matmul(&ones, &params[2 * l + 1])?;
            h = tape.add(&z, &bias)?;
            if l + 1 < layers {
                h = match self.spec.activation {
                    Activation::Tanh => tape.tanh(&h)?,
                    Activation::Relu => tape.relu(&h)?,
                };
            }
        }
        Ok(h)
    }
}

/// `v_θ(x) = θ·x` with a single scalar parameter; ignores time and condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarLinearField {
    dim: usize,
    params: Vec<Tensor>,
}

impl ScalarLinearField {
    pub fn new(theta: f64, dim: usize) -> Self {
        Self {
            dim,
            params: vec![Tensor::scalar(theta)],
        }
    }

    pub fn theta(&self) -> f64 {
        self.params[0].item()
    }
}

impl VelocityModel for ScalarLinearField {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn num_conditions(&self) -> usize {
        1
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn velocity(
        &self,
        tape: &Tape,
        params: &[Tensor],
        x: &Tensor,
        _ts: &[f64],
        conds: &[Condition],
    ) -> Result<Tensor> {
        for &c in conds {
            self.check_condition(c)?;
        }
        tape.mul(x, &params[0])
    }
}

/// Spatially constant velocity `v(x, t, c) = u`; has no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    velocity: Vec<f64>,
}

impl ConstantField {
    pub fn new(velocity: &[f64]) -> Self {
        Self {
            velocity: velocity.to_vec(),
        }
    }
}

impl VelocityModel for ConstantField {
    fn latent_dim(&self) -> usize {
        self.velocity.len()
    }

    fn num_conditions(&self) -> usize {
        1
    }

    fn params(&self) -> &[Tensor] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut []
    }

    fn velocity(
        &self,
        _tape: &Tape,
        _params: &[Tensor],
        x: &Tensor,
        _ts: &[f64],
        _conds: &[Condition],
    ) -> Result<Tensor> {
        let rows = x.rows();
        let data = (0..rows).flat_map(|_| self.velocity.iter().copied()).collect();
        Tensor::matrix(rows, self.velocity.len(), data)
    }
}
