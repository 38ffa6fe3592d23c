//! Central-difference gradients, used as the oracle for every backward rule.

use super::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i` of `x`.
///
/// `x` is perturbed in place and restored afterwards; `f` is handed the same
/// tensor and must recompute its value from scratch each call.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    let n = x.len();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = x.data()[i];
        x.update_data(|d| d[i] = orig + h);
        let plus = f(x);
        x.update_data(|d| d[i] = orig - h);
        let minus = f(x);
        x.update_data(|d| d[i] = orig);
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::from_vec(grad, x.shape()).expect("shape taken from x")
}

/// `‖a − b‖₂ / max(‖a‖₂ + ‖b‖₂, 1e-12)`: zero for identical vectors, at most 1.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}
