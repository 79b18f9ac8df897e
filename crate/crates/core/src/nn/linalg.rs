//! Row-major matrix products on top of `matrixmultiply`. Output rows are cut
//! into fixed blocks before any work is handed to threads, so every element
//! is accumulated in the same order regardless of the thread count.

use rayon::prelude::*;

const ROW_BLOCK: usize = 64;
const PAR_THRESHOLD: usize = 1 << 18;

/// Strides of a row-major operand, or of its transpose.
#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

fn product(a: Operand, b: Operand, c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let block = |(blk, rows): (usize, &mut [f64])| {
        let r0 = blk * ROW_BLOCK;
        let mb = rows.len() / n;
        let a_ptr = a.data[r0 * a.row_stride as usize..].as_ptr();
        // SAFETY: the strides and extents describe in-bounds views of `a`,
        // `b` and `rows`, which were sized by the callers' length checks.
        unsafe {
            matrixmultiply::dgemm(
                mb,
                k,
                n,
                1.0,
                a_ptr,
                a.row_stride,
                a.col_stride,
                b.data.as_ptr(),
                b.row_stride,
                b.col_stride,
                1.0,
                rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        c.chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    }
}

/// `C (m x n) += A (m x k) · B (k x n)`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    let a = Operand { data: a, row_stride: k as isize, col_stride: 1 };
    let b = Operand { data: b, row_stride: n as isize, col_stride: 1 };
    product(a, b, c, m, k, n);
}

/// `C (m x n) += A (m x k) · Bᵀ`, with `B` stored as `n x k`.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    let a = Operand { data: a, row_stride: k as isize, col_stride: 1 };
    let b = Operand { data: b, row_stride: 1, col_stride: k as isize };
    product(a, b, c, m, k, n);
}

/// `C (m x n) += Aᵀ · B`, with `A` stored as `k x m` and `B` as `k x n`.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    let a = Operand { data: a, row_stride: 1, col_stride: m as isize };
    let b = Operand { data: b, row_stride: n as isize, col_stride: 1 };
    product(a, b, c, m, k, n);
}
