/// `C = A·B + beta·C` for an `m×k` by `k×n` product with a row-major `C`.
///
/// `A` and `B` are addressed through explicit `(row, column)` strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm lhs out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm rhs out of bounds");
    }
    // SAFETY: the asserts above bound every strided access into a, b and c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
