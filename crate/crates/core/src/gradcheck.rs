//! Central finite differences, the reference every analytic gradient is
//! checked against.

use crate::tensor::Tensor;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Scalar form of [`finite_diff_grad`].
pub fn finite_diff_scalar<F: Fn(f64) -> f64>(f: F, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Largest coordinate-wise relative error `|a − b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is ~0 from dominating.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
