//! Row-major matrix kernels used by the conv and attention ops.
//!
//! `gemm_nn` is the single hot kernel: it accumulates rank-1 updates row by
//! row (`c[i, :] += a[i, l] * b[l, :]`), which vectorizes well and keeps the
//! reduction over `l` sequential for every output element, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work size above which a matrix product is split across threads by rows.
const PAR_THRESHOLD: usize = 1 << 17;

/// `c[m, n] += a[m, k] * b[k, n]`, all row-major.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [T], a_row: &[T]| {
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj = av.mul_add(bj, *cj);
            }
        }
    };
    if m > 1 && m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(c_row, a_row)| row(c_row, a_row));
    } else {
        for (c_row, a_row) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(c_row, a_row);
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`: plain dot products, sequential in `k`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (cj, b_row) in c_row.iter_mut().zip(b.chunks(k)) {
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = av.mul_add(bv, acc);
            }
            *cj = *cj + acc;
        }
    }
}

/// Out-of-place transpose of a row-major `rows x cols` matrix.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
