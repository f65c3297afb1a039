//! Dense real matrices, row-major, with a strided GEMM front end.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &RMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul(a: &RMatrix, ta: bool, b: &RMatrix, tb: bool) -> Result<RMatrix> {
        let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        if ka != kb {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{}{} * {}x{}{}",
                a.rows,
                a.cols,
                if ta { "^T" } else { "" },
                b.rows,
                b.cols,
                if tb { "^T" } else { "" }
            )));
        }
        let mut c = RMatrix::zeros(m, n);
        gemm(1.0, a.view(ta), b.view(tb), 0.0, c.view_mut());
        Ok(c)
    }

    pub fn view(&self, transposed: bool) -> MatRef<'_> {
        let v = MatRef {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        };
        if transposed {
            v.t()
        } else {
            v
        }
    }

    pub fn view_mut(&mut self) -> MatMut<'_> {
        MatMut {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
            data: &mut self.data,
        }
    }
}

impl std::ops::Index<(usize, usize)> for RMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for RMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Strided read-only view. `data` starts at element (0, 0).
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn t(self) -> MatRef<'a> {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    /// Sub-block starting at (r0, c0). Strides must be non-negative.
    pub fn block(self, r0: usize, c0: usize, rows: usize, cols: usize) -> MatRef<'a> {
        debug_assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let off = r0 as isize * self.rs + c0 as isize * self.cs;
        MatRef {
            data: &self.data[off as usize..],
            rows,
            cols,
            rs: self.rs,
            cs: self.cs,
        }
    }
}

pub struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatMut<'_> {
    pub fn block(&mut self, r0: usize, c0: usize, rows: usize, cols: usize) -> MatMut<'_> {
        debug_assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let off = r0 as isize * self.rs + c0 as isize * self.cs;
        MatMut {
            data: &mut self.data[off as usize..],
            rows,
            cols,
            rs: self.rs,
            cs: self.cs,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    check_extent(a.data.len(), a.rows, a.cols, a.rs, a.cs);
    check_extent(b.data.len(), b.rows, b.cols, b.rs, b.cs);
    check_extent(c.data.len(), c.rows, c.cols, c.rs, c.cs);
    // SAFETY: every view was checked above to address only elements inside
    // its backing slice, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            c.rows,
            a.cols,
            c.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.rs,
            c.cs,
        );
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!((last as usize) < len, "view exceeds its backing slice");
}
