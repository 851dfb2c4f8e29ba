//! Central finite differences: the independent oracle that every
//! reverse-mode gradient in the crate is checked against.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Estimates `∇f(x)` coordinate by coordinate as
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Oracle(format!("step must be positive, got {h}")));
    }
    let two_h = h + h;
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("non-finite evaluation at coordinate {i}")));
        }
        out.push((plus - minus) / two_h);
    }
    Tensor::new(x.shape(), out)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
///
/// The floor keeps the ratio meaningful when both gradients are
/// (numerically) zero.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    let norm = |t: &[T]| t.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / norm(a.data()).max(norm(b.data())).max(floor)
}
