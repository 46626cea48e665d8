//! Differentiable synthetic rewards, the hinge objective and the rule-based
//! compositional evaluator.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::model::Condition;

/// Default hinge threshold for the bounded rewards.
pub const DEFAULT_LAMBDA: f64 = 0.55;

fn one() -> f64 {
    1.0
}

/// Reward family and its per-condition targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// `exp(−sharpness·‖x − μ_c‖²)`.
    ModeProximity {
        targets: Vec<Vec<f64>>,
        #[serde(default = "one")]
        sharpness: f64,
    },
    /// `∏_i sigmoid(sharpness·s_i·x_i)` with `s ∈ {−1, +1}^D` per condition.
    CompositionalQuadrant {
        signs: Vec<Vec<f64>>,
        #[serde(default = "one")]
        sharpness: f64,
    },
    /// `⟨probe, x⟩`, identical for every condition.
    LinearProbe { probe: Vec<f64> },
}

impl RewardSpec {
    pub fn mode_proximity(targets: Vec<Vec<f64>>, sharpness: f64) -> Self {
        RewardSpec::ModeProximity { targets, sharpness }
    }

    pub fn compositional(signs: Vec<Vec<f64>>, sharpness: f64) -> Self {
        RewardSpec::CompositionalQuadrant { signs, sharpness }
    }

    /// Quadrant signs in the order `(+,+), (−,+), (−,−), (+,−)`.
    pub fn quadrant_signs() -> Vec<Vec<f64>> {
        vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]]
    }

    /// Hinge threshold used when none is configured: bounded rewards use
    /// [`DEFAULT_LAMBDA`]; the unbounded probe disables the hinge.
    pub fn default_lambda(&self) -> f64 {
        match self {
            RewardSpec::LinearProbe { .. } => f64::INFINITY,
            _ => DEFAULT_LAMBDA,
        }
    }

    /// Number of conditions with a target, or `None` when every condition
    /// shares one.
    pub fn num_conditions(&self) -> Option<usize> {
        match self {
            RewardSpec::ModeProximity { targets, .. } => Some(targets.len()),
            RewardSpec::CompositionalQuadrant { signs, .. } => Some(signs.len()),
            RewardSpec::LinearProbe { .. } => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            RewardSpec::ModeProximity { targets, .. } => targets.first().map_or(0, Vec::len),
            RewardSpec::CompositionalQuadrant { signs, .. } => signs.first().map_or(0, Vec::len),
            RewardSpec::LinearProbe { probe } => probe.len(),
        }
    }

    /// Sign table of the compositional reward.
    pub fn signs(&self) -> Option<&[Vec<f64>]> {
        match self {
            RewardSpec::CompositionalQuadrant { signs, .. } => Some(signs),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let rows: &[Vec<f64>] = match self {
            RewardSpec::ModeProximity { targets, .. } => targets,
            RewardSpec::CompositionalQuadrant { signs, .. } => signs,
            RewardSpec::LinearProbe { probe } => std::slice::from_ref(probe),
        };
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::config("reward", "targets must be non-empty and share a dimension"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("reward", "targets must be finite"));
        }
        if let RewardSpec::CompositionalQuadrant { signs, .. } = self {
            if signs.iter().flatten().any(|&s| s != 1.0 && s != -1.0) {
                return Err(Error::config("reward.signs", "signs must be +1 or -1"));
            }
        }
        match self {
            RewardSpec::ModeProximity { sharpness, .. } | RewardSpec::CompositionalQuadrant { sharpness, .. }
                if !(*sharpness > 0.0 && sharpness.is_finite()) =>
            {
                Err(Error::config("reward.sharpness", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    fn target<'a>(&self, rows: &'a [Vec<f64>], c: Condition) -> Result<&'a [f64]> {
        let count = rows.len();
        match c {
            Condition::Label(label) if label < count => Ok(&rows[label]),
            Condition::Label(label) => Err(Error::UnknownCondition { label, count }),
            Condition::Null => Err(Error::UnknownCondition { label: count, count }),
        }
    }

    /// Reward of a single latent row `x` (`[1, D]`), as a one-element tensor
    /// differentiable with respect to `x`.
    pub fn reward(&self, tape: &Tape, x: &Tensor, c: Condition) -> Result<Tensor> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "reward",
                lhs: x.shape().to_vec(),
                rhs: vec![1, self.dim()],
            });
        }
        let constant = |v: &[f64]| Tensor::new(x.shape().to_vec(), v.to_vec());
        match self {
            RewardSpec::ModeProximity { targets, sharpness } => {
                let mu = constant(self.target(targets, c)?)?;
                let dist2 = tape.sum(&tape.square(&tape.sub(x, &mu)?)?)?;
                tape.exp(&tape.scale(&dist2, -sharpness)?)
            }
            RewardSpec::CompositionalQuadrant { signs, sharpness } => {
                let s = constant(self.target(signs, c)?)?;
                let gates = tape.sigmoid(&tape.scale(&tape.mul(x, &s)?, *sharpness)?)?;
                let mut prod = tape.select(&gates, 0)?;
                for i in 1..gates.len() {
                    prod = tape.mul(&prod, &tape.select(&gates, i)?)?;
                }
                Ok(prod)
            }
            RewardSpec::LinearProbe { probe } => tape.sum(&tape.mul(x, &constant(probe)?)?),
        }
    }

    /// Plain reward values for each row of `x` (`[B, D]`).
    pub fn reward_values(&self, x: &Tensor, conds: &[Condition]) -> Result<Vec<f64>> {
        let tape = Tape::inert();
        let x = x.detach();
        (0..x.rows())
            .map(|r| Ok(self.reward(&tape, &x.row_at(r), conds[r])?.item()))
            .collect()
    }
}

/// `max(0, λ − r)`; the gradient is zero at the kink. An infinite `λ`
/// disables the hinge and returns `−r`.
pub fn hinge_loss(tape: &Tape, r: &Tensor, lambda: f64) -> Result<Tensor> {
    let neg = tape.neg(r)?;
    if lambda == f64::INFINITY {
        return Ok(neg);
    }
    tape.max_scalar(&tape.add_scalar(&neg, lambda)?, 0.0)
}

/// Fraction of rows whose every coordinate has the strict sign demanded by
/// its condition. Zero coordinates count as wrong.
pub fn compositional_eval(signs: &[Vec<f64>], samples: &Tensor, conds: &[Condition]) -> Result<f64> {
    let d = samples.cols();
    if samples.rows() != conds.len() || conds.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "compositional_eval",
            lhs: samples.shape().to_vec(),
            rhs: vec![conds.len()],
        });
    }
    let mut correct = 0usize;
    for (row, &c) in samples.data().chunks(d).zip(conds) {
        let label = c.label().filter(|&l| l < signs.len()).ok_or(Error::UnknownCondition {
            label: c.label().unwrap_or(signs.len()),
            count: signs.len(),
        })?;
        if row.iter().zip(&signs[label]).all(|(x, s)| x * s > 0.0) {
            correct += 1;
        }
    }
    Ok(correct as f64 / conds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quadrant(sharpness: f64) -> RewardSpec {
        RewardSpec::compositional(RewardSpec::quadrant_signs(), sharpness)
    }

    fn value(spec: &RewardSpec, x: &[f64], c: usize) -> f64 {
        spec.reward(&Tape::inert(), &Tensor::row(x), Condition::Label(c)).unwrap().item()
    }

    #[test]
    fn reward_examples() {
        let spec = RewardSpec::mode_proximity(vec![vec![2.0, 1.0], vec![-2.0, 1.0]], 1.5);
        assert_eq!(value(&spec, &[-2.0, 1.0], 1), 1.0);
        assert!((value(&quadrant(2.0), &[10.0, 10.0], 0) - 1.0).abs() < 1e-8);
        assert_eq!(value(&quadrant(2.0), &[0.0, 0.0], 2), 0.25);
        let probe = RewardSpec::LinearProbe { probe: vec![0.5, -1.0] };
        assert_eq!(value(&probe, &[2.0, 3.0], 0), -2.0);
    }

    #[test]
    fn unknown_condition_rejected() {
        let err = quadrant(1.0)
            .reward(&Tape::inert(), &Tensor::row(&[0.0, 0.0]), Condition::Label(4))
            .unwrap_err();
        assert!(matches!(err, Error::UnknownCondition { label: 4, count: 4 }));
    }

    #[test]
    fn hinge_examples() {
        let tape = Tape::new();
        let r = tape.leaf(&Tensor::scalar(0.7));
        let loss = hinge_loss(&tape, &r, 0.55).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert_eq!(tape.backward(&loss).unwrap().get(&r).unwrap(), &[0.0]);

        let tape = Tape::new();
        let r = tape.leaf(&Tensor::scalar(0.3));
        let loss = hinge_loss(&tape, &r, DEFAULT_LAMBDA).unwrap();
        assert!((loss.item() - 0.25).abs() < 1e-15);
        assert_eq!(tape.backward(&loss).unwrap().get(&r).unwrap(), &[-1.0]);

        let tape = Tape::new();
        let r = tape.leaf(&Tensor::scalar(0.55));
        let loss = hinge_loss(&tape, &r, 0.55).unwrap();
        assert_eq!(tape.backward(&loss).unwrap().get(&r).unwrap(), &[0.0]);
    }

    #[test]
    fn default_thresholds() {
        assert_eq!(quadrant(1.0).default_lambda(), 0.55);
        assert_eq!(RewardSpec::LinearProbe { probe: vec![1.0] }.default_lambda(), f64::INFINITY);
    }

    #[test]
    fn compositional_eval_examples() {
        let signs = RewardSpec::quadrant_signs();
        let conds: Vec<Condition> = (0..4).map(Condition::Label).collect();
        let centers = Tensor::matrix(4, 2, vec![2.0, 2.0, -2.0, 2.0, -2.0, -2.0, 2.0, -2.0]).unwrap();
        assert_eq!(compositional_eval(&signs, &centers, &conds).unwrap(), 1.0);
        assert_eq!(compositional_eval(&signs, &Tensor::zeros(&[4, 2]), &conds).unwrap(), 0.0);
        let mirrored = Tensor::matrix(4, 2, vec![-2.0, -2.0, 2.0, -2.0, 2.0, 2.0, -2.0, 2.0]).unwrap();
        assert_eq!(compositional_eval(&signs, &mirrored, &conds).unwrap(), 0.0);
    }

    #[test]
    fn spec_parses_with_defaults() {
        let spec: RewardSpec = toml::from_str("kind = \"mode_proximity\"\ntargets = [[1.0, 0.0]]").unwrap();
        assert_eq!(spec, RewardSpec::mode_proximity(vec![vec![1.0, 0.0]], 1.0));
        assert!(toml::from_str::<RewardSpec>("kind = \"linear_probe\"\nprobe = [1.0]\nextra = 1").is_err());
        assert!(quadrant(0.0).validate().is_err());
        assert!(RewardSpec::compositional(vec![vec![0.5, 1.0]], 1.0).validate().is_err());
    }

    proptest! {
        #[test]
        fn mode_proximity_decreases_along_rays(
            dir in prop::array::uniform2(-1.0f64..1.0),
            r1 in 0.0f64..3.0,
            dr in 1e-3f64..2.0,
        ) {
            let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
            prop_assume!(norm > 1e-3);
            let spec = RewardSpec::mode_proximity(vec![vec![0.5, -1.0]], 0.8);
            let at = |r: f64| value(&spec, &[0.5 + r * dir[0] / norm, -1.0 + r * dir[1] / norm], 0);
            prop_assert!(at(r1 + dr) < at(r1));
        }

        #[test]
        fn soft_and_hard_rules_agree_when_saturated(
            mag in prop::array::uniform2(0.0f64..4.0),
            flip in prop::array::uniform2(any::<bool>()),
            c in 0usize..4,
            sharpness in 1.0f64..4.0,
        ) {
            let spec = quadrant(sharpness);
            let x: Vec<f64> = (0..2)
                .map(|i| (3.0 / sharpness + mag[i]) * if flip[i] { -1.0 } else { 1.0 })
                .collect();
            let soft = value(&spec, &x, c) > 0.9;
            let hard = compositional_eval(
                &RewardSpec::quadrant_signs(),
                &Tensor::row(&x),
                &[Condition::Label(c)],
            ).unwrap() == 1.0;
            prop_assert_eq!(soft, hard);
        }

        #[test]
        fn hinge_gradient_is_piecewise_constant(r in -2.0f64..2.0, lambda in -1.0f64..1.5) {
            prop_assume!((r - lambda).abs() > 1e-4);
            let tape = Tape::new();
            let leaf = tape.leaf(&Tensor::scalar(r));
            let loss = hinge_loss(&tape, &leaf, lambda).unwrap();
            let g = tape.backward(&loss).unwrap().get(&leaf).unwrap()[0];
            let h = 1e-6;
            let f = |v: f64| (lambda - v).max(0.0);
            let fd = (f(r + h) - f(r - h)) / (2.0 * h);
            prop_assert!((g - fd).abs() < 1e-6);
            prop_assert!(g == 0.0 || g == -1.0);
        }
    }
}
