//! Central finite differences, used as an independent oracle for the
//! analytic gradients.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerical gradient of `f` at `x` by central differences with step `eps`.
pub fn numeric_gradient<T: Scalar>(x: &Tensor<T>, eps: f64, mut f: impl FnMut(&Tensor<T>) -> T) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    let h = T::of(eps);
    for i in 0..x.numel() {
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

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are tiny.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.data().iter().map(|&x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|&x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
