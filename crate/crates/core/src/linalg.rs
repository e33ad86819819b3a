//! Strided matrix products used by the tensor kernels.

use crate::Real;

/// Read-only strided matrix view over a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, S> {
    pub data: &'a [S],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> View<'a, S> {
    /// Row-major `rows x cols` matrix.
    pub fn rows(data: &'a [S], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [S], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

const SMALL: usize = 4096;

/// `C = alpha * A(m x k) * B(k x n) + beta * C`, where C is row-major with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: View<'_, S>,
    b: View<'_, S>,
    beta: S,
    c: &mut [S],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.fits(m, k) && b.fits(k, n), "gemm operand out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    if k == 0 || m * n * k <= SMALL {
        for i in 0..m {
            let row = &mut c[i * ldc..i * ldc + n];
            for (j, cij) in row.iter_mut().enumerate() {
                let mut acc = S::zero();
                for p in 0..k {
                    acc += a.data[i * a.rs + p * a.cs] * b.data[p * b.rs + j * b.cs];
                }
                *cij = if beta == S::zero() { alpha * acc } else { alpha * acc + beta * *cij };
            }
        }
        return;
    }
    // SAFETY: bounds of all three operands were checked above and `c` is a
    // unique borrow, so it cannot alias the shared inputs.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
