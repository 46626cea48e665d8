//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are methods on a [`Tape`]. Besides the usual arithmetic the
//! tape offers three gradient-shaping nodes used throughout post-training:
//! [`Tape::stop_gradient`], [`Tape::discount_blend`] and
//! [`Tape::straight_through`].
//!
//! ```
//! use leapflow::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::vector(&[1.0, 2.0, 3.0]));
//! let loss = tape.sum(&tape.square(&x).unwrap()).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, max_relative_error};
pub use tape::{Gradients, Tape};
pub use tensor::{NodeId, Tensor};

/// Gradient for every parameter tensor, in parameter order.
pub type GradientMap = Vec<Vec<f64>>;

/// Global L2 norm over a flattened gradient map.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Sums gradient maps in index order, so the result does not depend on how
/// the per-item maps were produced.
pub fn sum_gradients(maps: &[GradientMap]) -> Option<GradientMap> {
    let mut iter = maps.iter();
    let mut acc = iter.next()?.clone();
    for m in iter {
        for (a, g) in acc.iter_mut().zip(m) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    Some(acc)
}
