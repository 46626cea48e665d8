//! Gradient checks that rebuild the leap-trajectory gradient from Jacobians
//! instead of the backward pass.
//!
//! Jacobians come either from closed forms (for nets without hidden layers,
//! which are affine in both the latent and the parameters) or from central
//! finite differences of forward evaluations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::leap::{leap_predict, leap_predict_generic};
use crate::flow::model::{time_embedding, Condition, NetSpec, VelocityModel, VelocityNet};
use crate::flow::sampling::cfg_velocity;
use crate::flow::scheduler::Scheduler;
use crate::posttrain::config::FineTuneConfig;
use crate::posttrain::leap_trajectory::{build_leap_chain, ChainOptions};
use crate::posttrain::methods::{BatchPlan, Trainer};
use crate::reward::RewardSpec;

/// Row-major dense matrix.
pub type Matrix = Vec<Vec<f64>>;

/// Velocity Jacobians at the two anchors of a two-step leap.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBundle {
    /// `∂v/∂x` at `x_j`, `D × D`.
    pub dv_dx_j: Matrix,
    /// `∂v/∂θ` at `x_j`, `D × P`.
    pub dv_dtheta_j: Matrix,
    /// `∂v/∂θ` at `x_k`, `D × P`.
    pub dv_dtheta_k: Matrix,
}

/// A model evaluated at one time and condition with guidance.
#[derive(Clone, Copy)]
pub struct Probe<'a> {
    pub model: &'a dyn VelocityModel,
    pub condition: Condition,
    pub guidance: f64,
}

impl Probe<'_> {
    fn eval(&self, params: &[Tensor], x: &[f64], t: f64) -> Result<Vec<f64>> {
        let tape = Tape::inert();
        let v = cfg_velocity(self.model, &tape, params, &Tensor::row(x), &[t], &[self.condition], self.guidance)?;
        Ok(v.into_data())
    }

    fn param_jacobian_fd(&self, x: &[f64], t: f64, h: f64) -> Result<Matrix> {
        let base: Vec<Tensor> = self.model.detached();
        let d = x.len();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut params = base.clone();
        for pi in 0..base.len() {
            for e in 0..base[pi].len() {
                let orig = base[pi].data()[e];
                params[pi].data_mut()[e] = orig + h;
                let plus = self.eval(&params, x, t)?;
                params[pi].data_mut()[e] = orig - h;
                let minus = self.eval(&params, x, t)?;
                params[pi].data_mut()[e] = orig;
                cols.push((0..d).map(|o| (plus[o] - minus[o]) / (2.0 * h)).collect());
            }
        }
        Ok(transpose(&cols, d))
    }

    fn input_jacobian_fd(&self, x: &[f64], t: f64, h: f64) -> Result<Matrix> {
        let params = self.model.detached();
        let d = x.len();
        let mut cols = Vec::with_capacity(d);
        let mut xs = x.to_vec();
        for i in 0..d {
            xs[i] = x[i] + h;
            let plus = self.eval(&params, &xs, t)?;
            xs[i] = x[i] - h;
            let minus = self.eval(&params, &xs, t)?;
            xs[i] = x[i];
            cols.push((0..d).map(|o| (plus[o] - minus[o]) / (2.0 * h)).collect());
        }
        Ok(transpose(&cols, d))
    }
}

fn transpose(cols: &[Vec<f64>], rows: usize) -> Matrix {
    (0..rows).map(|r| cols.iter().map(|c| c[r]).collect()).collect()
}

/// Central-difference Jacobians with step `h`.
pub fn jacobians_fd(probe: Probe<'_>, x_k: &[f64], k: f64, x_j: &[f64], j: f64, h: f64) -> Result<JacobianBundle> {
    Ok(JacobianBundle {
        dv_dx_j: probe.input_jacobian_fd(x_j, j, h)?,
        dv_dtheta_j: probe.param_jacobian_fd(x_j, j, h)?,
        dv_dtheta_k: probe.param_jacobian_fd(x_k, k, h)?,
    })
}

/// Exact Jacobians of a net without hidden layers, `v = [x, φ(t), e_c]·W + b`,
/// under guidance `s`: `∂v/∂x` is the latent block of `Wᵀ`, and `∂v_o/∂W_{a,o}`
/// is the guidance-blended input feature `a`.
pub fn jacobians_linear(
    net: &VelocityNet,
    condition: Condition,
    guidance: f64,
    x_k: &[f64],
    k: f64,
    x_j: &[f64],
    j: f64,
) -> Result<JacobianBundle> {
    let spec: &NetSpec = net.spec();
    if !spec.hidden.is_empty() {
        return Err(Error::config("model.hidden", "closed-form Jacobians need a net without hidden layers"));
    }
    let d = spec.latent_dim;
    let width = spec.input_width();
    let w = net.params()[0].data();
    let features = |x: &[f64], t: f64, c: Condition| -> Vec<f64> {
        let mut f = x.to_vec();
        f.extend_from_slice(&time_embedding(t));
        let mut onehot = vec![0.0; spec.num_conditions + 1];
        onehot[c.label().unwrap_or(spec.num_conditions)] = 1.0;
        f.extend(onehot);
        f
    };
    let blended = |x: &[f64], t: f64| -> Vec<f64> {
        let fc = features(x, t, condition);
        if guidance == 1.0 {
            return fc;
        }
        let fu = features(x, t, Condition::Null);
        fu.iter().zip(&fc).map(|(u, c)| u + guidance * (c - u)).collect()
    };
    let dtheta = |x: &[f64], t: f64| -> Matrix {
        let e = blended(x, t);
        (0..d)
            .map(|o| {
                let mut row = vec![0.0; width * d + d];
                for a in 0..width {
                    row[a * d + o] = e[a];
                }
                row[width * d + o] = 1.0;
                row
            })
            .collect()
    };
    let dv_dx_j = (0..d).map(|o| (0..d).map(|i| w[i * d + o]).collect()).collect();
    Ok(JacobianBundle {
        dv_dx_j,
        dv_dtheta_j: dtheta(x_j, j),
        dv_dtheta_k: dtheta(x_k, k),
    })
}

/// `−j·∂v(x_j)/∂θ − (k−j)·∂v(x_k)/∂θ + α·j·(k−j)·∂v(x_j)/∂x_j·∂v(x_k)/∂θ`.
pub fn assemble_leap_gradient(bundle: &JacobianBundle, k: f64, j: f64, alpha: f64) -> Result<Matrix> {
    let d = bundle.dv_dx_j.len();
    let p = bundle.dv_dtheta_k.first().map_or(0, Vec::len);
    let consistent = bundle.dv_dx_j.iter().all(|r| r.len() == d)
        && bundle.dv_dtheta_j.len() == d
        && bundle.dv_dtheta_k.len() == d
        && bundle.dv_dtheta_j.iter().chain(&bundle.dv_dtheta_k).all(|r| r.len() == p);
    if !consistent {
        return Err(Error::ShapeMismatch {
            op: "assemble_leap_gradient",
            lhs: vec![d, d],
            rhs: vec![bundle.dv_dtheta_k.len(), p],
        });
    }
    let nested = alpha * j * (k - j);
    Ok((0..d)
        .map(|o| {
            (0..p)
                .map(|q| {
                    let cross: f64 = (0..d).map(|i| bundle.dv_dx_j[o][i] * bundle.dv_dtheta_k[i][q]).sum();
                    -j * bundle.dv_dtheta_j[o][q] - (k - j) * bundle.dv_dtheta_k[o][q] + nested * cross
                })
                .collect()
        })
        .collect())
}

/// Autodiff Jacobian `∂x̂_0/∂θ` (`D × P`) of the connected final latent of
/// the two-step leap through `(k, j, 0)`, one backward pass per coordinate.
pub fn autodiff_leap_jacobian(
    probe: Probe<'_>,
    x_k: &[f64],
    k: f64,
    x_j: &[f64],
    j: f64,
    alpha: f64,
) -> Result<Matrix> {
    let d = x_k.len();
    let tape = Tape::new();
    let params = probe.model.bind(&tape);
    let real = [Tensor::row(x_k), Tensor::row(x_j), Tensor::zeros(&[1, d])];
    let opts = ChainOptions { alpha, nested_only: false, guidance: probe.guidance };
    let lt = build_leap_chain(probe.model, &tape, &params, &real, &[k, j, 0.0], probe.condition, opts, &Scheduler::Rectified)?;
    let x0 = lt.final_latent();
    (0..d)
        .map(|o| {
            let coord = tape.select(x0, o)?;
            let g = tape.backward(&coord)?;
            Ok(params.iter().flat_map(|p| g.get_or_zero(p)).collect())
        })
        .collect()
}

/// `max |a − b| / max(max |b|, 1e-300)`.
pub fn matrix_relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-300)
}

/// Which Jacobians back the closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JacobianSource {
    Analytic,
    FiniteDifference { h: f64 },
}

/// Compares the backward-pass gradient of the connected final latent with
/// the closed-form assembly.
#[allow(clippy::too_many_arguments)]
pub fn compare_backward_vs_closed_form(
    net: &VelocityNet,
    condition: Condition,
    guidance: f64,
    x_k: &[f64],
    k: f64,
    x_j: &[f64],
    j: f64,
    alpha: f64,
    source: JacobianSource,
) -> Result<f64> {
    let probe = Probe { model: net, condition, guidance };
    let bundle = match source {
        JacobianSource::Analytic => jacobians_linear(net, condition, guidance, x_k, k, x_j, j)?,
        JacobianSource::FiniteDifference { h } => jacobians_fd(probe, x_k, k, x_j, j, h)?,
    };
    let expected = assemble_leap_gradient(&bundle, k, j, alpha)?;
    let actual = autodiff_leap_jacobian(probe, x_k, k, x_j, j, alpha)?;
    Ok(matrix_relative_error(&actual, &expected))
}

/// One randomized leap configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LeapCase {
    pub x_k: Vec<f64>,
    pub x_j: Vec<f64>,
    pub k: f64,
    pub j: f64,
    pub condition: Condition,
}

/// Random `x_k, x_j ~ N(0, I)`, `0 < j < k < 1` and condition label.
pub fn random_case(rng: &mut impl Rng, dim: usize, num_conditions: usize) -> LeapCase {
    use rand_distr::{Distribution, StandardNormal};
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    let x_k = normal(dim);
    let x_j = normal(dim);
    let a: f64 = rng.random_range(0.02..0.98);
    let b: f64 = rng.random_range(0.02..0.98);
    let (k, j) = if (a - b).abs() < 0.01 { (a.max(b) + 0.01, a.min(b)) } else { (a.max(b), a.min(b)) };
    LeapCase { x_k, x_j, k: k.min(0.99), j, condition: Condition::Label(rng.random_range(0..num_conditions)) }
}

/// Maximum disagreement between the rectified fast leap and the general
/// endpoint formula over random inputs.
pub fn verify_generic_reduction(trials: usize, seed: u64) -> Result<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::inert();
    let s = Scheduler::Rectified;
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let dim = 1 + trial % 4;
        let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k = if trial % 10 == 0 { 1.0 } else { rng.random_range(1e-3..1.0) };
        let j = if trial % 7 == 0 { 0.0 } else { rng.random_range(0.0..k) };
        let (x, v) = (Tensor::row(&x), Tensor::row(&v));
        let fast = leap_predict(&tape, &x, k, j, &v, &s)?;
        let generic = leap_predict_generic(&tape, &x, k, j, &v, &s)?;
        for (a, b) in fast.data().iter().zip(generic.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Velocity field `v(x) + ε·M·(x − x_j)·‖x − x_k‖²` with a fixed matrix `M`.
///
/// At the anchors `x_k` and `x_j` the added term and its parameter
/// derivative vanish, so forward values and single-step gradients are
/// unchanged; only `∂v/∂x` at `x_j` moves.
struct JacobianShift<'a> {
    base: &'a dyn VelocityModel,
    x_k: Vec<f64>,
    x_j: Vec<f64>,
    eps: f64,
}

impl VelocityModel for JacobianShift<'_> {
    fn latent_dim(&self) -> usize {
        self.base.latent_dim()
    }

    fn num_conditions(&self) -> usize {
        self.base.num_conditions()
    }

    fn params(&self) -> &[Tensor] {
        self.base.params()
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        unreachable!("probe models are read-only")
    }

    fn velocity(&self, tape: &Tape, params: &[Tensor], x: &Tensor, ts: &[f64], conds: &[Condition]) -> Result<Tensor> {
        let v = self.base.velocity(tape, params, x, ts, conds)?;
        let d = self.latent_dim();
        let xk = Tensor::row(&self.x_k);
        let xj = Tensor::row(&self.x_j);
        let to_k = tape.sub(x, &xk)?;
        let r2 = tape.sum(&tape.square(&to_k)?)?;
        let offset = tape.sub(x, &xj)?;
        // Fixed mixing matrix with ones on the anti-diagonal plus identity.
        let m: Vec<f64> = (0..d * d)
            .map(|e| if e / d == e % d || e / d + e % d == d - 1 { 1.0 } else { 0.0 })
            .collect();
        let mixed = tape.matmul(&offset, &Tensor::matrix(d, d, m)?)?;
        tape.add(&v, &tape.scale(&tape.mul(&mixed, &r2)?, self.eps)?)
    }
}

/// How a leap gradient treats the latent input of the second velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NestedConstruction {
    /// `discount_blend` with the given factor.
    Discounted(f64),
    /// The input is detached outright and the latent chain runs through
    /// plain Euler-style steps from `k` to `j` to `0`.
    InputDetached,
}

fn leap_gradient(model: &dyn VelocityModel, case: &LeapCase, guidance: f64, how: NestedConstruction) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let cond = [case.condition];
    let x_k = Tensor::row(&case.x_k);
    let x_j = Tensor::row(&case.x_j);
    let x0 = match how {
        NestedConstruction::Discounted(alpha) => {
            let real = [x_k, x_j, Tensor::zeros(&[1, case.x_k.len()])];
            let opts = ChainOptions { alpha, nested_only: false, guidance };
            let lt = build_leap_chain(model, &tape, &params, &real, &[case.k, case.j, 0.0], case.condition, opts, &Scheduler::Rectified)?;
            lt.final_latent().clone()
        }
        NestedConstruction::InputDetached => {
            let v_k = cfg_velocity(model, &tape, &params, &x_k, &[case.k], &cond, guidance)?;
            let pred_j = tape.sub(&x_k, &tape.scale(&v_k, case.k - case.j)?)?;
            let chained = tape.straight_through(&pred_j, &x_j)?;
            let v_j = cfg_velocity(model, &tape, &params, &tape.stop_gradient(&chained), &[case.j], &cond, guidance)?;
            tape.sub(&chained, &tape.scale(&v_j, case.j)?)?
        }
    };
    let g = tape.backward(&tape.sum(&x0)?)?;
    Ok(params.iter().flat_map(|p| g.get_or_zero(p)).collect())
}

/// Largest gradient change caused by moving only `∂v/∂x` at `x_j`.
pub fn nested_pathway_probe(
    model: &dyn VelocityModel,
    case: &LeapCase,
    guidance: f64,
    how: NestedConstruction,
    eps: f64,
) -> Result<f64> {
    let shifted = JacobianShift { base: model, x_k: case.x_k.clone(), x_j: case.x_j.clone(), eps };
    let a = leap_gradient(model, case, guidance, how)?;
    let b = leap_gradient(&shifted, case, guidance, how)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Maximum gradient difference between the discounted construction at
/// `α = 0` and the input-detached construction.
pub fn zero_discount_equivalence(model: &dyn VelocityModel, case: &LeapCase, guidance: f64) -> Result<f64> {
    let a = leap_gradient(model, case, guidance, NestedConstruction::Discounted(0.0))?;
    let b = leap_gradient(model, case, guidance, NestedConstruction::InputDetached)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Mean global gradient norm over `plans` for each discount factor, with
/// every other setting taken from `cfg`.
pub fn gradient_norm_probe(
    model: &dyn VelocityModel,
    cfg: &FineTuneConfig,
    reward: &RewardSpec,
    scheduler: &Scheduler,
    plans: &[BatchPlan],
    alphas: &[f64],
) -> Result<Vec<f64>> {
    alphas
        .iter()
        .map(|&alpha| {
            let cfg = FineTuneConfig { alpha, ..cfg.clone() };
            let trainer = Trainer::new(model, &cfg, reward, scheduler);
            let mut total = 0.0;
            for plan in plans {
                total += trainer.run_plan(plan)?.diagnostics.grad_norm;
            }
            Ok(total / plans.len().max(1) as f64)
        })
        .collect()
}

/// Checks that a sequence sampled on a uniform grid is convex, allowing a
/// relative slack `tol`.
pub fn is_convex_on_grid(values: &[f64], tol: f64) -> bool {
    let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    values.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] >= -tol * scale)
}

/// Outcome of one verification check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(name: &str, trials: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            check: name.to_string(),
            trials,
            max_error,
            tolerance,
            pass: max_error <= tolerance,
        }
    }
}

/// Closed-form gradient agreement over random nets and leap geometries.
pub fn closed_form_sweep(trials: usize, hidden: &[usize], source: JacobianSource, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let dim = if hidden.is_empty() { 1 + trial % 4 } else { 2 };
        let conds = 1 + trial % 2;
        let spec = NetSpec::new(dim, conds, hidden.to_vec());
        let net = randomized_net(spec, rng.random())?;
        let case = random_case(&mut rng, dim, conds);
        let guidance = [1.0, 3.5, 0.0][trial % 3];
        for alpha in [0.0, 0.3, 1.0] {
            let err = compare_backward_vs_closed_form(&net, case.condition, guidance, &case.x_k, case.k, &case.x_j, case.j, alpha, source)?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// A net with Xavier weights and small random biases, so every parameter
/// matters.
pub fn randomized_net(spec: NetSpec, seed: u64) -> Result<VelocityNet> {
    let mut net = VelocityNet::new(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (i, p) in net.params_mut().iter_mut().enumerate() {
        if i % 2 == 1 {
            for b in p.data_mut() {
                *b = rng.random_range(-0.2..0.2);
            }
        }
    }
    Ok(net)
}

/// Runs every oracle check at its documented tolerance.
pub fn run_all_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = vec![
        CheckReport::new("closed_form_linear_analytic", 20, closed_form_sweep(20, &[], JacobianSource::Analytic, seed)?, 1e-10),
        CheckReport::new(
            "closed_form_tanh_finite_difference",
            20,
            closed_form_sweep(20, &[4], JacobianSource::FiniteDifference { h: 1e-5 }, seed + 1)?,
            1e-4,
        ),
        CheckReport::new("generic_leap_reduction", 1000, verify_generic_reduction(1000, seed + 2)?, 1e-12),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let mut zero_alpha: f64 = 0.0;
    let mut detached_probe: f64 = 0.0;
    for _ in 0..10 {
        let net = randomized_net(NetSpec::new(2, 2, vec![6]), rng.random())?;
        let case = random_case(&mut rng, 2, 2);
        zero_alpha = zero_alpha.max(zero_discount_equivalence(&net, &case, 1.0)?);
        detached_probe = detached_probe
            .max(nested_pathway_probe(&net, &case, 1.0, NestedConstruction::InputDetached, 0.5)?)
            .max(nested_pathway_probe(&net, &case, 1.0, NestedConstruction::Discounted(0.0), 0.5)?);
    }
    reports.push(CheckReport::new("zero_discount_matches_input_detached", 10, zero_alpha, 0.0));
    reports.push(CheckReport::new("nested_pathway_absent_without_discount", 10, detached_probe, 0.0));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::model::ScalarLinearField;

    #[test]
    fn scalar_bundle_assembles_hand_value() {
        // v = θx with θ = 0.5: ∂v/∂x = θ, ∂v/∂θ = x.
        let bundle = JacobianBundle {
            dv_dx_j: vec![vec![0.5]],
            dv_dtheta_j: vec![vec![1.0]],
            dv_dtheta_k: vec![vec![2.0]],
        };
        let g = assemble_leap_gradient(&bundle, 0.8, 0.3, 0.3).unwrap();
        assert!((g[0][0] + 1.255).abs() < 1e-12);
        let g = assemble_leap_gradient(&bundle, 0.8, 0.3, 0.0).unwrap();
        assert!((g[0][0] + 1.3).abs() < 1e-12);
        let g = assemble_leap_gradient(&bundle, 0.8, 0.0, 0.3).unwrap();
        assert!((g[0][0] + 0.8 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_field_fd_bundle_matches_closed_form() {
        let field = ScalarLinearField::new(0.5, 1);
        let probe = Probe { model: &field, condition: Condition::Label(0), guidance: 1.0 };
        let b = jacobians_fd(probe, &[2.0], 0.8, &[1.0], 0.3, 1e-6).unwrap();
        assert!((b.dv_dx_j[0][0] - 0.5).abs() < 1e-8);
        assert!((b.dv_dtheta_k[0][0] - 2.0).abs() < 1e-8);
        assert!((b.dv_dtheta_j[0][0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn mismatched_bundle_rejected() {
        let bundle = JacobianBundle {
            dv_dx_j: vec![vec![1.0, 0.0]],
            dv_dtheta_j: vec![vec![1.0]],
            dv_dtheta_k: vec![vec![1.0]],
        };
        assert!(assemble_leap_gradient(&bundle, 0.5, 0.2, 0.3).is_err());
    }

    #[test]
    fn analytic_linear_jacobians_agree_with_finite_differences() {
        let net = randomized_net(NetSpec::new(3, 2, vec![]), 4).unwrap();
        let c = Condition::Label(1);
        let probe = Probe { model: &net, condition: c, guidance: 3.5 };
        let (xk, xj) = ([0.3, -0.2, 1.0], [0.1, 0.5, -0.7]);
        let a = jacobians_linear(&net, c, 3.5, &xk, 0.7, &xj, 0.2).unwrap();
        let f = jacobians_fd(probe, &xk, 0.7, &xj, 0.2, 1e-5).unwrap();
        assert!(matrix_relative_error(&f.dv_dtheta_k, &a.dv_dtheta_k) < 1e-8);
        assert!(matrix_relative_error(&f.dv_dx_j, &a.dv_dx_j) < 1e-8);
    }

    #[test]
    fn jacobian_shift_leaves_anchor_values_alone() {
        let net = randomized_net(NetSpec::new(2, 1, vec![3]), 2).unwrap();
        let shifted = JacobianShift { base: &net, x_k: vec![0.4, -0.1], x_j: vec![1.0, 0.2], eps: 0.7 };
        let tape = Tape::inert();
        for x in [[0.4, -0.1], [1.0, 0.2]] {
            let a = net.velocity(&tape, net.params(), &Tensor::row(&x), &[0.5], &[Condition::Label(0)]).unwrap();
            let b = shifted.velocity(&tape, net.params(), &Tensor::row(&x), &[0.5], &[Condition::Label(0)]).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn all_checks_pass() {
        for r in run_all_checks(7).unwrap() {
            println!("{} trials={} max_error={:.3e} tol={:.1e}", r.check, r.trials, r.max_error, r.tolerance);
            assert!(r.pass, "{}", r.check);
        }
    }

    #[test]
    fn discount_opens_nested_pathway() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let net = randomized_net(NetSpec::new(2, 2, vec![6]), rng.random()).unwrap();
            let case = random_case(&mut rng, 2, 2);
            let moved = nested_pathway_probe(&net, &case, 1.0, NestedConstruction::Discounted(0.3), 0.5).unwrap();
            assert!(moved > 1e-6, "{moved}");
        }
    }

    #[test]
    fn convexity_helper() {
        assert!(is_convex_on_grid(&[4.0, 1.0, 0.0, 1.0, 4.0], 0.0));
        assert!(!is_convex_on_grid(&[0.0, 1.0, 0.0], 1e-12));
    }
}
