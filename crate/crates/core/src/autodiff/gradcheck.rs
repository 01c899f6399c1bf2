//! Central-difference gradient oracle used by the test suites.

use super::{Float, Tensor};

/// Central-difference estimate of the gradient of a scalar function at `x`.
pub fn finite_difference_grad<T: Float>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Tensor<T> {
    let two_h = h + h;
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / two_h);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
}

/// Normwise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
