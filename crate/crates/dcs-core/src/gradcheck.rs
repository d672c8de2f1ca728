//! Central finite differences as an independent gradient oracle.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;

/// Central-difference estimate (f(x+h*e) - f(x-h*e)) / 2h per coordinate.
pub fn fd_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = vec![0.0; x.numel()];
    for (k, g) in grad.iter_mut().enumerate() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[k] += h;
        minus[k] -= h;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus).expect("same shape"));
        let fm = f(&Tensor::new(x.shape().to_vec(), minus).expect("same shape"));
        *g = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape")
}

/// Largest relative discrepancy between an analytic gradient and the oracle.
/// The denominator is floored at 1.0 so tiny gradients compare absolutely.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
        .fold(0.0, f64::max)
}
