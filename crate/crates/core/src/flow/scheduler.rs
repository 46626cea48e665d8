use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(α_t, β_t)` and their time derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePoint {
    pub alpha: f64,
    pub beta: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

/// Tabulated scheduler over a uniform grid on `[0, 1]`; values between grid
/// points are linearly interpolated, each column independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTable {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    d_alpha: Vec<f64>,
    d_beta: Vec<f64>,
}

impl ScheduleTable {
    /// Samples `f` at `intervals + 1` uniformly spaced times.
    pub fn sample(intervals: usize, f: impl Fn(f64) -> SchedulePoint) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::config("scheduler.intervals", "need at least one interval"));
        }
        let points: Vec<SchedulePoint> = (0..=intervals)
            .map(|i| f(i as f64 / intervals as f64))
            .collect();
        Self::from_columns(
            points.iter().map(|p| p.alpha).collect(),
            points.iter().map(|p| p.beta).collect(),
            points.iter().map(|p| p.d_alpha).collect(),
            points.iter().map(|p| p.d_beta).collect(),
        )
    }

    pub fn from_columns(
        alpha: Vec<f64>,
        beta: Vec<f64>,
        d_alpha: Vec<f64>,
        d_beta: Vec<f64>,
    ) -> Result<Self> {
        let n = alpha.len();
        if n < 2 || beta.len() != n || d_alpha.len() != n || d_beta.len() != n {
            return Err(Error::config(
                "scheduler.table",
                "columns must share a length of at least 2",
            ));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        if !(close(alpha[0], 1.0) && close(beta[0], 0.0) && close(alpha[n - 1], 0.0) && close(beta[n - 1], 1.0)) {
            return Err(Error::config(
                "scheduler.table",
                "boundary values must satisfy α(0)=1, β(0)=0, α(1)=0, β(1)=1",
            ));
        }
        if alpha.iter().chain(&beta).chain(&d_alpha).chain(&d_beta).any(|v| !v.is_finite()) {
            return Err(Error::config("scheduler.table", "entries must be finite"));
        }
        Ok(Self {
            alpha,
            beta,
            d_alpha,
            d_beta,
        })
    }

    pub fn intervals(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn columns(&self) -> [&[f64]; 4] {
        [&self.alpha, &self.beta, &self.d_alpha, &self.d_beta]
    }

    fn eval(&self, t: f64) -> SchedulePoint {
        let n = self.intervals();
        let pos = t * n as f64;
        let i = (pos.floor() as usize).min(n - 1);
        let w = pos - i as f64;
        let lerp = |col: &[f64]| {
            if w == 0.0 {
                col[i]
            } else if w == 1.0 {
                col[i + 1]
            } else {
                col[i] + w * (col[i + 1] - col[i])
            }
        };
        SchedulePoint {
            alpha: lerp(&self.alpha),
            beta: lerp(&self.beta),
            d_alpha: lerp(&self.d_alpha),
            d_beta: lerp(&self.d_beta),
        }
    }
}

/// Interpolation schedule `x_t = α_t x_0 + β_t x_1`, data at `t = 0` and
/// noise at `t = 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Scheduler {
    /// `α_t = 1 − t`, `β_t = t`.
    #[default]
    Rectified,
    Generic(ScheduleTable),
}

impl Scheduler {
    /// Tabulated `α = cos(πt/2)`, `β = sin(πt/2)`.
    pub fn cosine(intervals: usize) -> Result<Self> {
        use std::f64::consts::FRAC_PI_2;
        let table = ScheduleTable::sample(intervals, |t| {
            let (s, c) = (FRAC_PI_2 * t).sin_cos();
            SchedulePoint {
                alpha: if t == 1.0 { 0.0 } else { c },
                beta: s,
                d_alpha: -FRAC_PI_2 * s,
                d_beta: FRAC_PI_2 * c,
            }
        })?;
        Ok(Scheduler::Generic(table))
    }

    /// The rectified schedule expressed as a table, for cross-checking the
    /// generic code paths against the closed forms.
    pub fn rectified_table(intervals: usize) -> Result<Self> {
        let table = ScheduleTable::sample(intervals, |t| SchedulePoint {
            alpha: 1.0 - t,
            beta: t,
            d_alpha: -1.0,
            d_beta: 1.0,
        })?;
        Ok(Scheduler::Generic(table))
    }

    pub fn is_rectified(&self) -> bool {
        matches!(self, Scheduler::Rectified)
    }

    pub fn eval(&self, t: f64) -> Result<SchedulePoint> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(match self {
            Scheduler::Rectified => SchedulePoint {
                alpha: 1.0 - t,
                beta: t,
                d_alpha: -1.0,
                d_beta: 1.0,
            },
            Scheduler::Generic(table) => table.eval(t),
        })
    }
}
