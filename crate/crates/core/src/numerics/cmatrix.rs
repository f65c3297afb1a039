//! Dense complex matrices, row-major.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Complex = Complex64;

#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a column vector.
    pub fn column(v: &[Complex]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[Complex] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn add(&self, other: &CMatrix) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "add {}x{} + {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `self * v` for a vector `v` of length `cols`.
    pub fn mul_vec(&self, v: &[Complex]) -> Vec<Complex> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Writes `self * v` into `out` without allocating.
    pub fn mul_vec_into(&self, v: &[Complex], out: &mut [Complex]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            let mut acc = Complex::new(0.0, 0.0);
            for (a, b) in self.row(r).iter().zip(v) {
                acc += a * b;
            }
            *o = acc;
        }
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex;
    fn index(&self, (r, c): (usize, usize)) -> &Complex {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex {
        &mut self.data[r * self.cols + c]
    }
}

/// Complex matrix product `a * b`.
pub fn cmatmul(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "cmatmul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = CMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a[(i, k)];
            if aik == Complex::new(0.0, 0.0) {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Conjugate transpose.
pub fn hermitian(a: &CMatrix) -> CMatrix {
    let mut out = CMatrix::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out[(c, r)] = a[(r, c)].conj();
        }
    }
    out
}

/// Lower-triangular Cholesky factor `L` with `a = L L^H`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: CMatrix,
}

impl Cholesky {
    pub fn new(a: &CMatrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::DimensionMismatch(format!(
                "cholesky of non-square {}x{}",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let mut l = CMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Singular { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = Complex::new(djj, 0.0);
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &CMatrix {
        &self.l
    }

    /// log det(a) = 2 Σ log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.l.rows).map(|i| self.l[(i, i)].re.ln()).sum::<f64>() * 2.0
    }

    /// Solves `L z = b` in place.
    pub fn forward_in_place(&self, b: &mut [Complex]) {
        let n = self.l.rows;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)].re;
        }
    }

    /// Solves `L^H z = b` in place.
    pub fn backward_in_place(&self, b: &mut [Complex]) {
        let n = self.l.rows;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)].conj() * b[k];
            }
            b[i] = s / self.l[(i, i)].re;
        }
    }

    /// Solves `a x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[Complex]) -> Vec<Complex> {
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        x
    }

    pub fn solve(&self, b: &CMatrix) -> Result<CMatrix> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(Error::DimensionMismatch(format!(
                "solve {n}x{n} with rhs {}x{}",
                b.rows, b.cols
            )));
        }
        let mut x = CMatrix::zeros(n, b.cols);
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for c in 0..b.cols {
            for r in 0..n {
                col[r] = b[(r, c)];
            }
            self.forward_in_place(&mut col);
            self.backward_in_place(&mut col);
            for r in 0..n {
                x[(r, c)] = col[r];
            }
        }
        Ok(x)
    }

    /// Inverse of `a`.
    pub fn inverse(&self) -> CMatrix {
        let n = self.l.rows;
        self.solve(&CMatrix::identity(n))
            .expect("identity has matching dimensions")
    }
}

/// Solves `a x = b` for Hermitian positive definite `a`.
pub fn solve_hpd(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    Cholesky::new(a)?.solve(b)
}
