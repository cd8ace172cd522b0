/// `C = A·B + beta·C` with arbitrary row/column strides on A and B.
///
/// `C` is row-major `[m, n]` with row stride `c_row_stride`. Strides let callers multiply by
/// transposes or column blocks without copying.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_row_stride: usize,
    a_col_stride: usize,
    b: &[f64],
    b_row_stride: usize,
    b_col_stride: usize,
    c: &mut [f64],
    c_row_stride: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        c.len() >= (m - 1) * c_row_stride + n,
        "gemm output buffer too small"
    );
    if k == 0 {
        for i in 0..m {
            for x in c[i * c_row_stride..i * c_row_stride + n].iter_mut() {
                *x *= beta;
            }
        }
        return;
    }
    let a_last = (m - 1) * a_row_stride + (k - 1) * a_col_stride;
    let b_last = (k - 1) * b_row_stride + (n - 1) * b_col_stride;
    assert!(a_last < a.len(), "gemm lhs out of bounds");
    assert!(b_last < b.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every index dgemm touches in A, B
    // and C; the three slices cannot alias because C is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_row_stride as isize,
            a_col_stride as isize,
            b.as_ptr(),
            b_row_stride as isize,
            b_col_stride as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_rhs_via_strides() {
        // A = [[1,2],[3,4]], B^T where B = [[5,6],[7,8]] -> A·B^T
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, 2, 1, &b, 1, 2, &mut c, 2, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
