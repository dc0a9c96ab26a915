//! Dense kernels shared by the tape. All loops run in a fixed order so results
//! are bit-reproducible for a given input.

use super::tensor::Scalar;

const LANES: usize = 8;

/// Dot product with eight independent accumulators so the compiler can
/// vectorise it without reassociating a single sum.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av != T::zero() {
                axpy(av, &b[l * n..(l + 1) * n], row);
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for l in 0..k {
        let br = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            if av != T::zero() {
                axpy(av, br, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
    c
}

/// In-place numerically stable softmax of one contiguous slice.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `log Σ exp(row)` with max subtraction.
pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
