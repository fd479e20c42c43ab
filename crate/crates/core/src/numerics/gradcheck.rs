//! Central finite differences, used as an independent check on the tape.

use super::tensor::Tensor;

/// Step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Gradient of `f` at `x` by central differences.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.data().to_vec();
    let mut out = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = orig - step;
        let down = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`. The floor keeps all-but-zero gradients
/// from turning rounding noise into a large ratio.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    const FLOOR: f64 = 1e-7;
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(FLOOR)
}
