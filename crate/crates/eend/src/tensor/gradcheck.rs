//! Central finite-difference harness used to validate every analytic adjoint.

use super::Tensor;
use crate::scalar::Scalar;

/// Numeric gradient of `f` w.r.t. every element of every input, by central
/// differences with the given step. `f` must be a pure function of `inputs`.
pub fn finite_diff_gradients<T, F>(mut f: F, inputs: &[Tensor<T>], step: f64) -> Vec<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> T,
{
    let h = T::fl(step);
    let two_h = h + h;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[ti].shape());
        for e in 0..inputs[ti].len() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + h;
            let up = f(&work);
            work[ti].data_mut()[e] = orig - h;
            let down = f(&work);
            work[ti].data_mut()[e] = orig;
            g.data_mut()[e] = (up - down) / two_h;
        }
        grads.push(g);
    }
    grads
}

/// Relative error with a small floor so near-zero gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Worst elementwise [`relative_error`] between two same-shape tensors.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a.wide(), n.wide()))
        .fold(0.0, f64::max)
}
