//! Finite-difference gradient checking.
//!
//! The checker re-evaluates a loss as a pure function of parameter values and
//! never touches the backward pass, so it stays an independent oracle for it.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Worst relative error between analytic and central-difference gradients.
///
/// `eval` maps the full parameter set to a scalar loss. For every parameter
/// tensor, the coordinates in `coords[i]` are perturbed by `±h` and the
/// resulting slope is compared against `analytic[i]` at the same coordinate.
/// The relative error denominator is floored so near-zero gradients compare
/// absolutely.
pub fn max_relative_error<S: Scalar>(
    params: &[Tensor<S>],
    analytic: &[Tensor<S>],
    coords: &[Vec<usize>],
    h: f64,
    eval: impl Fn(&[Tensor<S>]) -> S,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    assert_eq!(params.len(), coords.len());
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<S>> = params.to_vec();
    for (pi, coord_list) in coords.iter().enumerate() {
        for &ci in coord_list {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + S::of(h);
            let up = eval(&work).to_f64_lossy();
            work[pi].data_mut()[ci] = orig - S::of(h);
            let down = eval(&work).to_f64_lossy();
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic[pi].data()[ci].to_f64_lossy();
            let denom = exact.abs().max(numeric.abs()).max(1e-6);
            let err = (exact - numeric).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Evenly spread coordinate sample: all coordinates for small tensors, a
/// strided subset capped at `max_per_tensor` for large ones.
pub fn sample_coords<S: Scalar>(params: &[Tensor<S>], max_per_tensor: usize) -> Vec<Vec<usize>> {
    params
        .iter()
        .map(|p| {
            let n = p.len();
            if n <= max_per_tensor {
                (0..n).collect()
            } else {
                let stride = n / max_per_tensor;
                (0..max_per_tensor).map(|i| i * stride).collect()
            }
        })
        .collect()
}
