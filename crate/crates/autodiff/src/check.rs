//! Numerical differentiation helpers for verifying analytic gradients.
//!
//! These evaluate the function under test from scratch at perturbed inputs,
//! so they share no code path with [`Tape::grad`](crate::Tape::grad) and can
//! serve as an independent oracle in tests.

use crate::Arr;

/// Central-difference gradient of scalar-valued `f` at `x`.
///
/// Runs `f` twice per element of `x`, so keep inputs small. Accuracy is
/// O(eps^2); `eps` around 1e-5 suits values of order 1 in `f64`.
pub fn central_diff(mut f: impl FnMut(&Arr) -> f64, x: &Arr, eps: f64) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[&idx];
        probe[&idx] = orig + eps;
        let up = f(&probe);
        probe[&idx] = orig - eps;
        let down = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest absolute elementwise difference between two equally shaped arrays.
pub fn max_abs_diff(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing differently shaped arrays");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest elementwise difference relative to the magnitude of the reference
/// value, with an absolute floor so near-zero entries do not blow up.
pub fn max_rel_diff(a: &Arr, reference: &Arr, floor: f64) -> f64 {
    assert_eq!(a.shape(), reference.shape());
    a.iter()
        .zip(reference.iter())
        .map(|(x, r)| (x - r).abs() / r.abs().max(floor))
        .fold(0.0, f64::max)
}
