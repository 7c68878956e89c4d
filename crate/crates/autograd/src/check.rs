//! Central finite-difference helpers shared by gradient tests.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central difference of `f` at `x` along every coordinate.
pub fn numeric_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (h + h);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// reporting huge ratios.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`rel_err`] over matching elements.
pub fn max_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x.as_f64(), y.as_f64(), floor))
        .fold(0.0, f64::max)
}
