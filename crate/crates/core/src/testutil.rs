//! Shared oracles for unit and integration tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// Uniform [-1, 1] leaf tensor. Values are drawn in f64 so the same seed
/// yields the same tensor (up to rounding) at every scalar type.
pub fn random_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::of(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform [-1, 1] parameter tensor.
pub fn random_parameter<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<S> {
    let t = random_tensor(rng, shape);
    t.set_requires_grad(true);
    t
}

/// Largest relative mismatch between backprop gradients and central finite
/// differences of `loss_fn`, taken over every element of every tensor in
/// `params`.
///
/// `loss_fn` must rebuild the graph from the tensors' current values on each
/// call. Near-zero gradient pairs (both below 1e-8) are treated as matching;
/// the caller is responsible for keeping the case away from non-differentiable
/// points (relu kinks, pool ties).
pub fn finite_difference_max_rel_err<F>(params: &[Tensor<f64>], loss_fn: F, h: f64) -> f64
where
    F: Fn() -> Tensor<f64>,
{
    for p in params {
        p.clear_grad();
    }
    let loss = loss_fn();
    loss.backward().expect("loss must be scalar");
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().expect("parameter must receive a gradient"))
        .collect();

    let mut worst: f64 = 0.0;
    for (p, grad) in params.iter().zip(&grads) {
        let base = p.value();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            p.set_data(plus).unwrap();
            let up = loss_fn().item();

            let mut minus = base.clone();
            minus[i] -= h;
            p.set_data(minus).unwrap();
            let down = loss_fn().item();

            p.set_data(base.clone()).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad[i];
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-8 {
                continue;
            }
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

/// True when every value in the tensor keeps at least `margin` distance from
/// zero. Used to skip finite-difference cases that straddle a relu kink.
pub fn clear_of_zero(t: &Tensor<f64>, margin: f64) -> bool {
    t.value().iter().all(|v| v.abs() > margin)
}
