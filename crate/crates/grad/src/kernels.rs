//! Row-major dense kernels. Matrix products go through `matrixmultiply`;
//! the rest are plain loops over contiguous memory.

/// `out (n x p) += a (n x m) * b (m x p)`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    gemm_acc(a, (m, 1), b, (p, 1), out, n, m, p);
}

/// `out (n x p) += a (n x m) * b^T` where `b` is `p x m`.
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    gemm_acc(a, (m, 1), b, (1, m), out, n, m, p);
}

/// `out (n x p) += a^T * b` where `a` is `m x n` and `b` is `m x p`.
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    gemm_acc(a, (1, n), b, (p, 1), out, n, m, p);
}

/// `out (n x p) += A (n x m) * B (m x p)` with `A`, `B` given by
/// `(row stride, column stride)` over their slices.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    out: &mut [f64],
    n: usize,
    m: usize,
    p: usize,
) {
    assert!(a.len() >= n * m && b.len() >= m * p && out.len() >= n * p);
    if n == 0 || m == 0 || p == 0 {
        return;
    }
    // SAFETY: the assertion above keeps every strided access of the
    // n x m, m x p and n x p views inside their slices.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            p,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            out.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unfolds `x` (`channels x len`, rows `ch_start..ch_start+ch`) into
/// `(ch * k) x out_len` columns for a strided convolution.
pub(crate) fn im2col(
    x: &[f64],
    len: usize,
    ch_start: usize,
    ch: usize,
    k: usize,
    stride: usize,
    out_len: usize,
) -> Vec<f64> {
    let mut col = vec![0.0; ch * k * out_len];
    for c in 0..ch {
        let x_row = &x[(ch_start + c) * len..(ch_start + c + 1) * len];
        for j in 0..k {
            let dst = &mut col[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            if stride == 1 {
                dst.copy_from_slice(&x_row[j..j + out_len]);
            } else {
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = x_row[t * stride + j];
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_acc(
    col: &[f64],
    dx: &mut [f64],
    len: usize,
    ch_start: usize,
    ch: usize,
    k: usize,
    stride: usize,
    out_len: usize,
) {
    for c in 0..ch {
        let dx_row = &mut dx[(ch_start + c) * len..(ch_start + c + 1) * len];
        for j in 0..k {
            let src = &col[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            for (t, &s) in src.iter().enumerate() {
                dx_row[t * stride + j] += s;
            }
        }
    }
}
