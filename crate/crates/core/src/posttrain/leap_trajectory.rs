use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::leap::leap_predict;
use crate::flow::model::{Condition, VelocityModel};
use crate::flow::sampling::{cfg_velocity, Trajectory};
use crate::flow::scheduler::Scheduler;
use crate::posttrain::config::SimilarityMode;

/// Shortened path through anchor times with straight-through connectors.
///
/// `real[i]` is the detached rollout latent at `times[i]`; `predicted[i]`
/// and `connected[i]` exist for every anchor after the first (index
/// `i - 1`). Connected latents carry the real values forward and route
/// gradients into the matching prediction.
#[derive(Debug, Clone)]
pub struct LeapTrajectory {
    pub anchors: Vec<usize>,
    pub times: Vec<f64>,
    pub real: Vec<Tensor>,
    pub predicted: Vec<Tensor>,
    pub connected: Vec<Tensor>,
    pub distances: Vec<f64>,
}

impl LeapTrajectory {
    /// The connected final latent.
    pub fn final_latent(&self) -> &Tensor {
        self.connected.last().expect("at least one leap")
    }

    /// The last one-step prediction.
    pub fn final_prediction(&self) -> &Tensor {
        self.predicted.last().expect("at least one leap")
    }
}

/// Options for [`build_leap_chain`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainOptions {
    pub alpha: f64,
    pub nested_only: bool,
    pub guidance: f64,
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Builds a leap trajectory from detached anchor latents at arbitrary times
/// `times` (strictly descending, at least two entries).
///
/// The first velocity sees the detached first latent; every later velocity
/// sees `discount_blend(connected, alpha)`. Under `nested_only` the leading
/// latent of every later leap is detached, which removes the single-step
/// term of the earlier anchors.
#[allow(clippy::too_many_arguments)]
pub fn build_leap_chain(
    model: &dyn VelocityModel,
    tape: &Tape,
    params: &[Tensor],
    real: &[Tensor],
    times: &[f64],
    condition: Condition,
    opts: ChainOptions,
    scheduler: &Scheduler,
) -> Result<LeapTrajectory> {
    if real.len() != times.len() || times.len() < 2 {
        return Err(Error::config("anchors", "need matching latents and at least two anchor times"));
    }
    if times.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::config("anchors", "anchor times must be strictly descending"));
    }
    let real: Vec<Tensor> = real.iter().map(Tensor::detach).collect();
    let mut predicted = Vec::with_capacity(times.len() - 1);
    let mut connected: Vec<Tensor> = Vec::with_capacity(times.len() - 1);
    let mut distances = Vec::with_capacity(times.len() - 1);
    for i in 0..times.len() - 1 {
        let (input, leading) = match connected.last() {
            None => (real[0].clone(), real[0].clone()),
            Some(prev) => {
                let input = tape.discount_blend(prev, opts.alpha)?;
                let leading = if opts.nested_only { tape.stop_gradient(prev) } else { prev.clone() };
                (input, leading)
            }
        };
        let v = cfg_velocity(model, tape, params, &input, &[times[i]], &[condition], opts.guidance)?;
        let pred = leap_predict(tape, &leading, times[i], times[i + 1], &v, scheduler)?;
        let conn = tape.straight_through(&pred, &real[i + 1])?;
        distances.push(mean_abs_diff(&real[i + 1], &pred));
        predicted.push(pred);
        connected.push(conn);
    }
    Ok(LeapTrajectory {
        anchors: Vec::new(),
        times: times.to_vec(),
        real,
        predicted,
        connected,
        distances,
    })
}

/// Leap trajectory over grid anchors of a rollout.
pub fn build_leap_trajectory(
    model: &dyn VelocityModel,
    tape: &Tape,
    params: &[Tensor],
    traj: &Trajectory,
    anchors: &[usize],
    opts: ChainOptions,
    scheduler: &Scheduler,
) -> Result<LeapTrajectory> {
    if anchors.iter().any(|&a| a > traj.steps) {
        return Err(Error::config("anchors", "anchor outside the rollout grid"));
    }
    let real: Vec<Tensor> = anchors.iter().map(|&a| traj.latents[a].detach()).collect();
    let times: Vec<f64> = anchors.iter().map(|&a| traj.timesteps[a]).collect();
    let mut lt = build_leap_chain(model, tape, params, &real, &times, traj.condition, opts, scheduler)?;
    lt.anchors = anchors.to_vec();
    Ok(lt)
}

/// `1 / Σ max(d, τ)` over the selected connections. The last distance is
/// the terminal connection; all earlier ones are intermediate. Mode `None`
/// or an empty selection gives 1.
pub fn similarity_weight(distances: &[f64], tau: f64, mode: SimilarityMode) -> f64 {
    let n = distances.len();
    let selected: Vec<f64> = match mode {
        SimilarityMode::None => return 1.0,
        SimilarityMode::Both => distances.to_vec(),
        SimilarityMode::DjOnly => distances[..n.saturating_sub(1)].to_vec(),
        SimilarityMode::D0Only => distances.last().copied().into_iter().collect(),
    };
    if selected.is_empty() {
        return 1.0;
    }
    1.0 / selected.iter().map(|&d| d.max(tau)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::model::{ConstantField, ScalarLinearField};
    use crate::flow::sampling::{sample_trajectory, SampleSettings};

    fn opts(alpha: f64) -> ChainOptions {
        ChainOptions { alpha, nested_only: false, guidance: 1.0 }
    }

    fn scalar_chain_grad(alpha: f64, nested_only: bool) -> f64 {
        let field = ScalarLinearField::new(0.5, 1);
        let tape = Tape::new();
        let params = field.bind(&tape);
        let real = [Tensor::row(&[2.0]), Tensor::row(&[1.0]), Tensor::row(&[0.0])];
        let o = ChainOptions { alpha, nested_only, guidance: 1.0 };
        let lt = build_leap_chain(&field, &tape, &params, &real, &[0.8, 0.3, 0.0], Condition::Label(0), o, &Scheduler::Rectified)
            .unwrap();
        let out = tape.sum(lt.final_latent()).unwrap();
        tape.backward(&out).unwrap().get(&params[0]).unwrap()[0]
    }

    #[test]
    fn scalar_linear_example() {
        // −j·x_j − (k−j)·x_k + α·j·(k−j)·θ·x_k with θ = 0.5, x_k = 2, x_j = 1.
        let expected: f64 = -0.3 * 1.0 - 0.5 * 2.0 + 0.3 * 0.3 * 0.5 * 0.5 * 2.0;
        assert!((expected + 1.255).abs() < 1e-12);
        assert!((scalar_chain_grad(0.3, false) - expected).abs() < 1e-12);
        assert!((scalar_chain_grad(0.0, false) + 1.3).abs() < 1e-12);
        // Without the leading path only the j-step and discounted cross term remain.
        assert!((scalar_chain_grad(0.3, true) - (-0.3 + 0.045)).abs() < 1e-12);
    }

    #[test]
    fn scalar_example_matches_finite_differences() {
        let f = |theta: f64| {
            // Forward of connected x0 is the real latent; differentiate the
            // straight-through surrogate instead: x_j' = x_k − (k−j)θx_k
            // perturbed around the real value, then x0 = x_j' − jθ·x_j'.
            let (xk, xj, k, j, alpha): (f64, f64, f64, f64, f64) = (2.0, 1.0, 0.8, 0.3, 0.3);
            let pred_j = xk - (k - j) * theta * xk;
            let conn_j = xj + (pred_j - (xk - (k - j) * 0.5 * xk));
            let blended = xj + alpha * (conn_j - xj);
            conn_j - j * theta * blended
        };
        let h = 1e-6;
        let fd = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h);
        assert!((fd - scalar_chain_grad(0.3, false)).abs() < 1e-8);
    }

    #[test]
    fn constant_field_leaps_are_exact() {
        let field = ConstantField::new(&[1.0, -0.5]);
        let s = SampleSettings { steps: 16, guidance: 1.0 };
        let traj = sample_trajectory(&field, &Tape::inert(), &[], Condition::Label(0), Tensor::row(&[0.25, 0.75]), s, &[])
            .unwrap();
        let tape = Tape::new();
        let lt = build_leap_trajectory(&field, &tape, &[], &traj, &[12, 4, 0], opts(0.3), &Scheduler::Rectified).unwrap();
        assert_eq!(lt.distances, vec![0.0, 0.0]);
        for (p, r) in lt.predicted.iter().zip(&lt.real[1..]) {
            assert_eq!(p.data(), r.data());
        }
    }

    #[test]
    fn connected_latents_equal_rollout_bitwise() {
        let field = ScalarLinearField::new(-0.7, 2);
        let s = SampleSettings { steps: 25, guidance: 1.0 };
        let traj = sample_trajectory(&field, &Tape::inert(), field.params(), Condition::Label(0), Tensor::row(&[0.3, -1.1]), s, &[])
            .unwrap();
        let tape = Tape::new();
        let params = field.bind(&tape);
        let lt = build_leap_trajectory(&field, &tape, &params, &traj, &[21, 9, 0], opts(0.3), &Scheduler::Rectified).unwrap();
        for (c, &a) in lt.connected.iter().zip(&lt.anchors[1..]) {
            assert_eq!(c.data(), traj.latents[a].data());
        }
        assert!(lt.distances.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity_weight(&[0.0, 0.0], 0.1, SimilarityMode::Both), 5.0);
        assert!((similarity_weight(&[0.3, 0.5], 0.1, SimilarityMode::Both) - 1.25).abs() < 1e-15);
        assert_eq!(similarity_weight(&[0.3, 0.5], 0.1, SimilarityMode::None), 1.0);
        assert_eq!(similarity_weight(&[0.25, 0.5], 0.1, SimilarityMode::DjOnly), 4.0);
        assert_eq!(similarity_weight(&[0.25, 0.5], 0.1, SimilarityMode::D0Only), 2.0);
        assert_eq!(similarity_weight(&[0.5], 0.1, SimilarityMode::DjOnly), 1.0);
    }
}
