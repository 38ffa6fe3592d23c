//! Dense row-major kernels. Summation order is fixed, so results are
//! bit-reproducible on one thread.

use super::Element;

/// `a[m,k] · b[k,n]`.
pub(crate) fn gemm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (i, orow) in out.chunks_exact_mut(n.max(1)).take(m).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a[m,k]`, `b[m,n]`, giving `[k,n]`.
pub(crate) fn gemm_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a[m,k]`, `b[n,k]`, giving `[m,n]`.
pub(crate) fn gemm_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    gemm(a, &bt, m, k, n)
}

pub(crate) fn transpose<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let half = T::cast(0.5);
    let inner = T::cast(GELU_C) * (x + T::cast(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::cast(0.5);
    let inner = T::cast(GELU_C) * (x + T::cast(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::cast(GELU_C) * (T::one() + T::cast(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
