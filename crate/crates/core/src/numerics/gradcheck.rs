//! Central finite-difference gradient oracle.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate of `∂f/∂x` at `at`.
///
/// Each element is perturbed by `±eps` in `f32`; the quotient uses the
/// realized step `x⁺ − x⁻` so representation error in the perturbed point
/// does not bias the estimate. `f` returns its value in `f64`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    at: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = at.clone();
    let mut out = Vec::with_capacity(at.numel());
    for i in 0..at.numel() {
        let x = at.data()[i];
        let (hi, lo) = (x + eps, x - eps);
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe)?;
        probe.data_mut()[i] = x;
        out.push(((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32);
    }
    Ok(Tensor::from_parts(at.shape().to_vec(), out))
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let scale = a.sum_sq().sqrt().max(b.sum_sq().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
