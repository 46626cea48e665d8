use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::posttrain::config::{FineTuneConfig, Selection};

/// Grid indices `1..=steps` whose times fall inside `t_range`.
pub fn candidate_indices(t_range: [f64; 2], steps: usize) -> Vec<usize> {
    (1..=steps)
        .filter(|&i| {
            let t = i as f64 / steps as f64;
            t_range[0] <= t && t <= t_range[1]
        })
        .collect()
}

/// Grid index nearest to `index − distance·steps`; ties resolve to the
/// smaller index (smaller time).
pub fn nearest_below(index: usize, distance: f64, steps: usize) -> isize {
    let target = index as f64 - distance * steps as f64;
    (target - 0.5).ceil() as isize
}

/// Draws `leap_steps` anchor indices on the `steps`-point grid, strictly
/// descending, with the terminal index 0 appended.
pub fn select_anchors(cfg: &FineTuneConfig, steps: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let s = cfg.leap_steps;
    let candidates = candidate_indices(cfg.t_range, steps);
    let mut anchors = match cfg.selection {
        Selection::Random => {
            if candidates.len() < s {
                return Err(Error::config(
                    "finetune.t_range",
                    format!("only {} grid points in t_range, {s} anchors needed", candidates.len()),
                ));
            }
            let mut picked: Vec<usize> = sample(rng, candidates.len(), s)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            picked.sort_unstable_by(|a, b| b.cmp(a));
            picked
        }
        Selection::FixedDistance => {
            let chain = |k: usize| -> Option<Vec<usize>> {
                let mut out = vec![k];
                for _ in 1..s {
                    let next = nearest_below(*out.last().unwrap(), cfg.distance, steps);
                    if next < 1 || !candidates.contains(&(next as usize)) {
                        return None;
                    }
                    out.push(next as usize);
                }
                Some(out)
            };
            let valid: Vec<Vec<usize>> = candidates.iter().filter_map(|&k| chain(k)).collect();
            if valid.is_empty() {
                return Err(Error::config(
                    "finetune.t_range",
                    "no anchor chain at the requested distance fits inside t_range",
                ));
            }
            valid[rng.random_range(0..valid.len())].clone()
        }
    };
    anchors.push(0);
    Ok(anchors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_pairs_are_reproducible() {
        let cfg = FineTuneConfig::default();
        let a = select_anchors(&cfg, 25, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = select_anchors(&cfg, 25, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a[0] > a[1] && a[1] > 0 && a[2] == 0);
    }

    #[test]
    fn fixed_distance_tie_goes_to_smaller_time() {
        assert_eq!(nearest_below(20, 0.5, 25), 7);
        assert_eq!(nearest_below(20, 0.5, 24), 8);
        let cfg = FineTuneConfig { selection: Selection::FixedDistance, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let a = select_anchors(&cfg, 25, &mut rng).unwrap();
            assert_eq!(a[1], nearest_below(a[0], 0.5, 25) as usize);
        }
    }

    #[test]
    fn single_leap_has_one_anchor() {
        let cfg = FineTuneConfig { leap_steps: 1, ..Default::default() };
        let a = select_anchors(&cfg, 25, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a[0] >= 1 && a[1] == 0);
    }

    #[test]
    fn narrow_ranges_rejected() {
        let cfg = FineTuneConfig { t_range: [0.5, 0.52], ..Default::default() };
        assert!(select_anchors(&cfg, 25, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let cfg = FineTuneConfig { t_range: [0.0, 0.5], selection: Selection::FixedDistance, ..Default::default() };
        assert!(select_anchors(&cfg, 25, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #[test]
        fn anchors_descend_inside_range(
            seed in any::<u64>(),
            s in 1usize..=3,
            lo in 0.0f64..0.6,
            width in 0.3f64..1.0,
            steps in 5usize..40,
        ) {
            let hi = (lo + width).min(1.0);
            let cfg = FineTuneConfig { leap_steps: s, t_range: [lo, hi], ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match select_anchors(&cfg, steps, &mut rng) {
                Ok(a) => {
                    prop_assert_eq!(a.len(), s + 1);
                    prop_assert_eq!(*a.last().unwrap(), 0);
                    prop_assert!(a.windows(2).all(|w| w[0] > w[1]));
                    for &i in &a[..s] {
                        let t = i as f64 / steps as f64;
                        prop_assert!(lo <= t && t <= hi);
                    }
                }
                Err(_) => prop_assert!(candidate_indices([lo, hi], steps).len() < s),
            }
        }
    }
}
