use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::model::Condition;

/// Conditional isotropic Gaussian mixture.
///
/// Each condition `c` picks a mode from `condition_weights[c]` (defaulting to
/// mode `c` with certainty) and adds `std`-scaled standard-normal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub centers: Vec<Vec<f64>>,
    #[serde(default = "default_std")]
    pub std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_weights: Option<Vec<Vec<f64>>>,
}

fn default_std() -> f64 {
    0.3
}

impl MixtureSpec {
    pub fn new(centers: Vec<Vec<f64>>, std: f64) -> Self {
        Self {
            centers,
            std,
            condition_weights: None,
        }
    }

    /// Two modes at `(±2, 0)`.
    pub fn two_modes() -> Self {
        Self::new(vec![vec![-2.0, 0.0], vec![2.0, 0.0]], 0.3)
    }

    /// Four modes at `(±2, ±2)` in the order `(+,+), (−,+), (−,−), (+,−)`.
    pub fn quadrants() -> Self {
        Self::new(
            vec![vec![2.0, 2.0], vec![-2.0, 2.0], vec![-2.0, -2.0], vec![2.0, -2.0]],
            0.3,
        )
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn num_conditions(&self) -> usize {
        self.condition_weights
            .as_ref()
            .map_or(self.centers.len(), Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.centers.iter().any(|c| c.len() != d) {
            return Err(Error::config("data.centers", "centers must be non-empty and share a dimension"));
        }
        if self.centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("data.centers", "centers must be finite"));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::config("data.std", "must be positive"));
        }
        if let Some(w) = &self.condition_weights {
            if w.is_empty() {
                return Err(Error::config("data.condition_weights", "must list at least one condition"));
            }
            for row in w {
                if row.len() != self.centers.len() || row.iter().any(|&p| !(p >= 0.0)) || row.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::config(
                        "data.condition_weights",
                        "each row needs one non-negative weight per center with a positive sum",
                    ));
                }
            }
        }
        Ok(())
    }

    fn pick_mode(&self, rng: &mut impl Rng, c: usize) -> usize {
        match &self.condition_weights {
            None => c,
            Some(w) => {
                let row = &w[c];
                let total: f64 = row.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (m, &p) in row.iter().enumerate() {
                    if u < p {
                        return m;
                    }
                    u -= p;
                }
                row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
            }
        }
    }

    /// Draws `batch` points with uniformly random conditions.
    pub fn sample(&self, rng: &mut impl Rng, batch: usize) -> (Tensor, Vec<Condition>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(batch * d);
        let mut conds = Vec::with_capacity(batch);
        for _ in 0..batch {
            let c = rng.random_range(0..self.num_conditions());
            let m = self.pick_mode(rng, c);
            for &mu in &self.centers[m] {
                let z: f64 = StandardNormal.sample(rng);
                data.push(mu + self.std * z);
            }
            conds.push(Condition::Label(c));
        }
        (Tensor::matrix(batch, d, data).expect("batch is positive"), conds)
    }

    /// Fraction of rows lying within `k·std` of some center.
    pub fn fraction_near_modes(&self, samples: &Tensor, k: f64) -> f64 {
        let d = samples.cols();
        let rows = samples.rows();
        let radius = k * self.std;
        let near = samples
            .data()
            .chunks(d)
            .filter(|x| {
                self.centers.iter().any(|c| {
                    let dist2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    dist2.sqrt() <= radius
                })
            })
            .count();
        near as f64 / rows as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_follow_condition_modes() {
        let spec = MixtureSpec::two_modes();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, conds) = spec.sample(&mut rng, 2000);
        for (row, c) in x.data().chunks(2).zip(&conds) {
            let mu = &spec.centers[c.label().unwrap()];
            assert!((row[0] - mu[0]).abs() < 6.0 * spec.std);
        }
        assert!(spec.fraction_near_modes(&x, 3.0) > 0.95);
    }

    #[test]
    fn condition_weights_mix_modes() {
        let mut spec = MixtureSpec::quadrants();
        spec.condition_weights = Some(vec![vec![0.5, 0.5, 0.0, 0.0]; 4]);
        spec.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, _) = spec.sample(&mut rng, 4000);
        let upper_right = x.data().chunks(2).filter(|r| r[0] > 0.0).count() as f64 / 4000.0;
        assert!((upper_right - 0.5).abs() < 0.05);
        assert!(x.data().chunks(2).all(|r| r[1] > 0.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MixtureSpec::new(vec![], 0.3).validate().is_err());
        assert!(MixtureSpec::new(vec![vec![0.0]], 0.0).validate().is_err());
        let mut spec = MixtureSpec::two_modes();
        spec.condition_weights = Some(vec![vec![1.0]]);
        assert!(spec.validate().is_err());
    }
}
