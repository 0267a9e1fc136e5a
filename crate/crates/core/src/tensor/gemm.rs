//! Bounds-checked wrapper over the packed GEMM kernels.
//!
//! The kernels are single threaded and their summation order depends only on
//! the problem size, so identical inputs give bitwise identical outputs.

use super::Float;

/// A row-major `rows x cols` matrix inside a flat buffer, optionally read
/// transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    /// Shape of the stored (untransposed) matrix.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T: Float> MatRef<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols, row stride, col stride) after transposition.
    fn logical(&self) -> (usize, usize, isize, isize) {
        let rs = self.cols as isize;
        if self.transposed {
            (self.cols, self.rows, 1, rs)
        } else {
            (self.rows, self.cols, rs, 1)
        }
    }

    fn check(&self) {
        assert!(
            self.offset + self.rows * self.cols <= self.data.len(),
            "gemm operand out of bounds"
        );
    }
}

/// `out[off..off+m*n] = alpha * a * b + beta * out[...]`, output row-major.
pub(crate) fn gemm<T: Float>(
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    out: &mut [T],
    out_offset: usize,
) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm inner extents");
    a.check();
    b.check();
    assert!(out_offset + m * n <= out.len(), "gemm output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[out_offset..out_offset + m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    // SAFETY: the asserts above keep every index the kernel touches inside
    // the three slices, and `out` does not alias `a` or `b` (borrowck).
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            rsa,
            csa,
            b.data.as_ptr().add(b.offset),
            rsb,
            csb,
            beta,
            out.as_mut_ptr().add(out_offset),
            n as isize,
            1,
        );
    }
}
