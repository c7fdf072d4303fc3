//! Strided matrix multiply on top of `matrixmultiply::dgemm`.

/// A strided read-only view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` matrix starting at `offset`.
    pub fn rm(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self { data, offset, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn tr(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self { data, offset, rs: 1, cs: cols }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "gemm view out of bounds");
    }
}

/// `c = alpha * a (m x k) * b (k x n) + beta * c`, where `c` is written
/// through row stride `rsc` / column stride `csc` starting at `c_off`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c_off + (m - 1) * rsc + (n - 1) * csc;
    assert!(last < c.len(), "gemm output out of bounds");
    // SAFETY: every index touched by dgemm lies inside the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}
