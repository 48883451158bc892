//! Central finite differences, used to check tape gradients.

use super::tensor::Tensor;

/// Default step for double-precision checks.
pub const STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries whose true gradient is ~0 from dividing rounding
/// noise by nothing.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`rel_error`] across two equally shaped tensors.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| rel_error(a, b, floor))
        .fold(0.0, f64::max)
}

/// [`max_rel_error`] with the floor set to `1e-3` of the largest numeric
/// entry, so near-zero entries are judged against the tensor's own scale.
pub fn scaled_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = numeric.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    max_rel_error(analytic, numeric, (1e-3 * scale).max(1e-10))
}
