//! Central finite differences, the independent oracle for every backward
//! rule in the crate.
//!
//! The estimators here never touch the tape: they re-evaluate the given
//! function at perturbed inputs, so agreement with [`crate::Tape::backward`]
//! certifies the analytic rules. Checks are only meaningful in 64-bit mode.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of a tensor-to-scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)` per element.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Vec<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let step = T::from_f64c(h);
    let base = x.data().to_vec();
    let mut grad = vec![T::zero(); base.len()];
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + step;
        let plus = f(&Tensor::from_vec(x.shape(), work.clone()));
        work[i] = base[i] - step;
        let minus = f(&Tensor::from_vec(x.shape(), work.clone()));
        work[i] = base[i];
        grad[i] = (plus - minus) / (step + step);
    }
    grad
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest elementwise [`rel_err`] between two gradients.
pub fn max_rel_err<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a.to_f64c(), n.to_f64c()))
        .fold(0.0, f64::max)
}
