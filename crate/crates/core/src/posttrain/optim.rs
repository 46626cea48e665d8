use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{path}.lr"), "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{path}.{name}"), "must lie in [0,1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{path}.weight_decay"), "must be non-negative"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("{path}.eps"), "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamWState,
    hyper: &AdamWConfig,
) -> Result<()> {
    let shapes_match = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::ShapeMismatch {
            op: "optimizer_step",
            lhs: params.iter().map(Tensor::len).collect(),
            rhs: grads.iter().map(Vec::len).collect(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (k, theta) in p.data_mut().iter_mut().enumerate() {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * *theta);
        }
    }
    Ok(())
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut [Tensor], params: &[Tensor], decay: f64) -> Result<()> {
    if ema.len() != params.len() || ema.iter().zip(params).any(|(e, p)| e.len() != p.len()) {
        return Err(Error::ShapeMismatch {
            op: "ema_update",
            lhs: ema.iter().map(Tensor::len).collect(),
            rhs: params.iter().map(Tensor::len).collect(),
        });
    }
    for (e, p) in ema.iter_mut().zip(params) {
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point_without_decay() {
        let mut params = vec![Tensor::vector(&[0.5, -1.5])];
        let hyper = AdamWConfig { weight_decay: 0.0, lr: 0.1, ..Default::default() };
        let mut state = AdamWState::new(&params);
        optimizer_step(&mut params, &[vec![0.0, 0.0]], &mut state, &hyper).unwrap();
        assert_eq!(params[0].data(), &[0.5, -1.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g| + ε).
        let mut params = vec![Tensor::scalar(0.0)];
        let hyper = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut state = AdamWState::new(&params);
        optimizer_step(&mut params, &[vec![1.0]], &mut state, &hyper).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
        assert!((params[0].item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut params = vec![Tensor::scalar(2.0)];
        let hyper = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut state = AdamWState::new(&params);
        optimizer_step(&mut params, &[vec![0.0]], &mut state, &hyper).unwrap();
        assert!((params[0].item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(state.m[0], vec![0.0]);
    }

    #[test]
    fn defaults() {
        let h = AdamWConfig::default();
        assert_eq!((h.lr, h.beta1, h.beta2, h.weight_decay), (1e-5, 0.9, 0.999, 1e-4));
    }

    #[test]
    fn ema_examples() {
        let params = vec![Tensor::scalar(2.0)];
        let mut ema = vec![Tensor::scalar(1.0)];
        ema_update(&mut ema, &params, 0.995).unwrap();
        assert!((ema[0].item() - 1.005).abs() < 1e-12);
        let mut ema = vec![Tensor::scalar(1.0)];
        ema_update(&mut ema, &params, 0.0).unwrap();
        assert_eq!(ema[0].item(), 2.0);
        let mut ema = vec![Tensor::scalar(1.0)];
        ema_update(&mut ema, &params, 1.0).unwrap();
        assert_eq!(ema[0].item(), 1.0);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamWState::new(&params);
        assert!(optimizer_step(&mut params, &[vec![0.0, 1.0]], &mut state, &AdamWConfig::default()).is_err());
    }
}
