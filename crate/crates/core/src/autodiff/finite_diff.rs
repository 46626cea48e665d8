use super::tensor::Tensor;

/// Central-difference gradient of a scalar function of several parameter
/// tensors: `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every coordinate.
///
/// `f` receives the full, perturbed parameter list on every call and must be
/// deterministic. Parameters are restored before returning.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..work.len() {
        let mut g = vec![0.0; work[p].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = f(&work);
            work[p].data_mut()[i] = orig - h;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between two gradient maps, using
/// `|a − b| / max(|a|, |b|, floor)` per coordinate.
pub fn max_relative_error(a: &[Vec<f64>], b: &[Vec<f64>], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient maps differ in length");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "gradient entries differ in length");
            x.iter().zip(y)
        })
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
