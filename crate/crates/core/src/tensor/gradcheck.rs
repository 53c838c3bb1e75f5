//! Central finite-difference utilities used by gradient tests.

use super::Arr;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff(f: &mut dyn FnMut(&Arr) -> f64, x: &Arr, eps: f64) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let slot = probe.as_slice_mut().expect("contiguous");
        let orig = slot[idx];
        slot[idx] = orig + eps;
        let hi = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let lo = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Max relative error between two gradients, with an absolute floor so that
/// near-zero components compare on absolute error instead.
pub fn max_rel_err(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let denom = x.abs().max(y.abs()).max(1e-6);
            (x - y).abs() / denom
        })
        .fold(0.0, f64::max)
}
