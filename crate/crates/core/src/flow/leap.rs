use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::scheduler::Scheduler;

const SINGULAR: f64 = 1e-12;

/// `α_t·x0 + β_t·x1`.
pub fn noise_interpolate(tape: &Tape, x0: &Tensor, x1: &Tensor, t: f64, s: &Scheduler) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::ShapeMismatch {
            op: "noise_interpolate",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    let p = s.eval(t)?;
    combine(tape, x0, p.alpha, x1, p.beta)
}

fn combine(tape: &Tape, a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Result<Tensor> {
    tape.add(&tape.scale(a, ca)?, &tape.scale(b, cb)?)
}

/// Endpoint estimates `(x̂_{0|t}, x̂_{1|t})` obtained by inverting
/// `x_t = α x0 + β x1`, `v = α̇ x0 + β̇ x1` for the scheduler at `t`.
///
/// Near `t = 1` (`α ≈ 0`) the data endpoint is solved first and the noise
/// endpoint recovered from `x_t`; near `t = 0` the roles swap.
pub fn predict_endpoints(
    tape: &Tape,
    x_t: &Tensor,
    t: f64,
    v_t: &Tensor,
    s: &Scheduler,
) -> Result<(Tensor, Tensor)> {
    if x_t.shape() != v_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "predict_endpoints",
            lhs: x_t.shape().to_vec(),
            rhs: v_t.shape().to_vec(),
        });
    }
    let p = s.eval(t)?;
    let checked = |denominator: f64| {
        if denominator.abs() < SINGULAR || !denominator.is_finite() {
            Err(Error::SingularScheduler { t, denominator })
        } else {
            Ok(denominator)
        }
    };
    // x̂0 = (v − (β̇/β)·x) / (α̇ − β̇α/β)
    let data_first = |tape: &Tape| -> Result<Tensor> {
        let den = checked(p.d_alpha - p.d_beta * p.alpha / p.beta)?;
        combine(tape, v_t, 1.0 / den, x_t, -(p.d_beta / p.beta) / den)
    };
    // x̂1 = (v − (α̇/α)·x) / (β̇ − α̇β/α)
    let noise_first = |tape: &Tape| -> Result<Tensor> {
        let den = checked(p.d_beta - p.d_alpha * p.beta / p.alpha)?;
        combine(tape, v_t, 1.0 / den, x_t, -(p.d_alpha / p.alpha) / den)
    };
    if p.alpha.abs() < SINGULAR {
        let x0 = data_first(tape)?;
        let x1 = combine(tape, x_t, 1.0 / p.beta, &x0, -p.alpha / p.beta)?;
        Ok((x0, x1))
    } else if p.beta.abs() < SINGULAR {
        let x1 = noise_first(tape)?;
        let x0 = combine(tape, x_t, 1.0 / p.alpha, &x1, -p.beta / p.alpha)?;
        Ok((x0, x1))
    } else {
        Ok((data_first(tape)?, noise_first(tape)?))
    }
}

/// One-step leap `x̂_{j|k}` from the velocity at time `k` to time `j`.
///
/// The rectified schedule uses `x_k − (k−j)·v_k`; other schedules go
/// through [`leap_predict_generic`]. `j == k` returns `x_k` unchanged.
pub fn leap_predict(
    tape: &Tape,
    x_k: &Tensor,
    k: f64,
    j: f64,
    v_k: &Tensor,
    s: &Scheduler,
) -> Result<Tensor> {
    if j == k {
        return Ok(x_k.clone());
    }
    match s {
        Scheduler::Rectified => {
            if x_k.shape() != v_k.shape() {
                return Err(Error::ShapeMismatch {
                    op: "leap_predict",
                    lhs: x_k.shape().to_vec(),
                    rhs: v_k.shape().to_vec(),
                });
            }
            s.eval(k)?;
            s.eval(j)?;
            tape.sub(x_k, &tape.scale(v_k, k - j)?)
        }
        Scheduler::Generic(_) => leap_predict_generic(tape, x_k, k, j, v_k, s),
    }
}

/// `α_j·x̂_{0|k} + β_j·x̂_{1|k}` for any scheduler, including the rectified one.
pub fn leap_predict_generic(
    tape: &Tape,
    x_k: &Tensor,
    k: f64,
    j: f64,
    v_k: &Tensor,
    s: &Scheduler,
) -> Result<Tensor> {
    let (x0, x1) = predict_endpoints(tape, x_k, k, v_k, s)?;
    let p = s.eval(j)?;
    if p.beta == 0.0 {
        return Ok(x0);
    }
    combine(tape, &x0, p.alpha, &x1, p.beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v)
    }

    #[test]
    fn interpolation_examples() {
        let tape = Tape::inert();
        let s = Scheduler::Rectified;
        let (a, b) = (row(&[1.0, 0.0]), row(&[0.0, 2.0]));
        assert_eq!(noise_interpolate(&tape, &a, &b, 0.25, &s).unwrap().data(), &[0.75, 0.5]);
        let (a, b) = (row(&[0.3, -1.7]), row(&[2.2, 0.9]));
        assert_eq!(noise_interpolate(&tape, &a, &b, 0.0, &s).unwrap().data(), a.data());
        assert_eq!(noise_interpolate(&tape, &a, &b, 1.0, &s).unwrap().data(), b.data());
        assert!(noise_interpolate(&tape, &a, &row(&[1.0]), 0.5, &s).is_err());
    }

    #[test]
    fn leap_examples() {
        let tape = Tape::inert();
        let s = Scheduler::Rectified;
        let x = row(&[1.0, 1.0]);
        let v = row(&[2.0, 0.0]);
        let out = leap_predict(&tape, &x, 0.8, 0.3, &v, &s).unwrap();
        assert!((out.data()[0]).abs() < 1e-15 && out.data()[1] == 1.0);
        let same = leap_predict(&tape, &x, 0.6, 0.6, &v, &s).unwrap();
        assert_eq!(same.data(), x.data());
    }

    #[test]
    fn endpoints_invert_straight_paths() {
        let tape = Tape::inert();
        let s = Scheduler::Rectified;
        let (a, b) = ([0.5, -1.25], [2.0, 0.75]);
        let t = 0.25;
        let x: Vec<f64> = (0..2).map(|i| (1.0 - t) * a[i] + t * b[i]).collect();
        let v: Vec<f64> = (0..2).map(|i| b[i] - a[i]).collect();
        let (x0, x1) = predict_endpoints(&tape, &row(&x), t, &row(&v), &s).unwrap();
        assert_eq!(x0.data(), &a);
        assert_eq!(x1.data(), &b);

        let (x0, x1) = predict_endpoints(&tape, &row(&[1.0, 1.0]), 0.5, &row(&[0.0, 0.0]), &s).unwrap();
        assert_eq!(x0.data(), &[1.0, 1.0]);
        assert_eq!(x1.data(), &[1.0, 1.0]);
    }

    #[test]
    fn boundary_branches() {
        let tape = Tape::inert();
        let s = Scheduler::Rectified;
        let x = row(&[0.4, -0.2]);
        let v = row(&[1.5, 0.5]);
        let (x0, x1) = predict_endpoints(&tape, &x, 1.0, &v, &s).unwrap();
        assert!((x0.data()[0] - (0.4 - 1.5)).abs() < 1e-15);
        assert_eq!(x1.data(), x.data());
        let (x0, _) = predict_endpoints(&tape, &x, 0.0, &v, &s).unwrap();
        assert_eq!(x0.data(), x.data());
        let direct = leap_predict_generic(&tape, &x, 0.7, 0.0, &v, &s).unwrap();
        let (x0, _) = predict_endpoints(&tape, &x, 0.7, &v, &s).unwrap();
        assert_eq!(direct.data(), x0.data());
    }

    #[test]
    fn cosine_schedule_is_consistent() {
        let tape = Tape::inert();
        let s = Scheduler::cosine(10_000).unwrap();
        let (a, b) = ([0.3, -0.6], [1.1, 0.2]);
        let t = 0.45;
        let p = s.eval(t).unwrap();
        let x: Vec<f64> = (0..2).map(|i| p.alpha * a[i] + p.beta * b[i]).collect();
        let v: Vec<f64> = (0..2).map(|i| p.d_alpha * a[i] + p.d_beta * b[i]).collect();
        let (x0, x1) = predict_endpoints(&tape, &row(&x), t, &row(&v), &s).unwrap();
        for i in 0..2 {
            assert!((x0.data()[i] - a[i]).abs() < 1e-10);
            assert!((x1.data()[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_denominator_reported() {
        use crate::flow::scheduler::ScheduleTable;
        // α̇ = β̇ = 0 everywhere makes both denominators vanish.
        let table = ScheduleTable::from_columns(vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0; 2], vec![0.0; 2]).unwrap();
        let s = Scheduler::Generic(table);
        let err = predict_endpoints(&Tape::inert(), &row(&[1.0]), 0.5, &row(&[1.0]), &s).unwrap_err();
        assert!(matches!(err, Error::SingularScheduler { .. }));
    }
}
