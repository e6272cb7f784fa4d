//! Safe wrapper over the `matrixmultiply` kernels.

/// Row-major operand of a matrix product, optionally read transposed.
#[derive(Clone, Copy, Debug)]
pub struct Mat<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, S> Mat<'a, S> {
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    /// The transpose of this matrix, without copying.
    pub fn t(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

macro_rules! gemm_impl {
    ($name:ident, $ty:ty, $kernel:path) => {
        /// `c = a · b + (accumulate ? c : 0)` with `c` row-major.
        pub(crate) fn $name(a: Mat<'_, $ty>, b: Mat<'_, $ty>, c: &mut [$ty], accumulate: bool) {
            let (m, k) = a.logical();
            let (k2, n) = b.logical();
            assert_eq!(k, k2, "inner dimensions differ");
            assert!(a.data.len() >= a.rows * a.cols, "left operand too short");
            assert!(b.data.len() >= b.rows * b.cols, "right operand too short");
            assert!(c.len() >= m * n, "output too short");
            if m == 0 || n == 0 {
                return;
            }
            if k == 0 {
                if !accumulate {
                    c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                }
                return;
            }
            let (rsa, csa) = a.strides();
            let (rsb, csb) = b.strides();
            let beta = if accumulate { 1.0 } else { 0.0 };
            // SAFETY: the asserts above bound every index the kernel reads
            // or writes by the lengths of the three slices.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    };
}

gemm_impl!(sgemm, f32, matrixmultiply::sgemm);
gemm_impl!(dgemm, f64, matrixmultiply::dgemm);
