//! Small dense vector and matrix helpers. Everything here is row-major and
//! sized for the tens-of-dimensions games the solvers target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn scale<F: Scalar>(alpha: F, x: &mut [F]) {
    for xi in x.iter_mut() {
        *xi = *xi * alpha;
    }
}

pub fn all_finite<F: Scalar>(x: &[F]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> DenseMatrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<F>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == F::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                axpy(a, orow, dst);
            }
        }
        out
    }

    /// `out = A v`
    pub fn matvec_into(&self, v: &[F], out: &mut [F]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), v);
        }
    }

    pub fn matvec(&self, v: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); self.rows];
        self.matvec_into(v, &mut out);
        out
    }

    /// `out = A^T v`
    pub fn matvec_transposed(&self, v: &[F]) -> Vec<F> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![F::zero(); self.cols];
        for (r, &vr) in v.iter().enumerate() {
            axpy(vr, self.row(r), &mut out);
        }
        out
    }

    /// `v^T A v`
    pub fn quadratic_form(&self, v: &[F]) -> F {
        debug_assert_eq!(self.rows, self.cols);
        (0..self.rows).fold(F::zero(), |acc, r| acc + v[r] * dot(self.row(r), v))
    }

    pub fn frobenius_norm(&self) -> F {
        norm(&self.data)
    }

    /// Largest singular value by power iteration on `A^T A`.
    ///
    /// Converges from below; the iteration count is fixed so the value is
    /// reproducible.
    pub fn spectral_norm(&self) -> F {
        if self.data.iter().all(|&v| v == F::zero()) {
            return F::zero();
        }
        let mut v: Vec<F> = (0..self.cols)
            .map(|i| F::one() / F::from_count(i + 1))
            .collect();
        let n0 = norm(&v);
        scale(F::one() / n0, &mut v);
        let mut sigma = F::zero();
        for _ in 0..500 {
            let av = self.matvec(&v);
            let mut atav = self.matvec_transposed(&av);
            let nrm = norm(&atav);
            if nrm == F::zero() {
                break;
            }
            sigma = nrm.sqrt();
            scale(F::one() / nrm, &mut atav);
            v = atav;
        }
        sigma
    }
}

/// Solves the square system `a x = b` by Gaussian elimination with partial
/// pivoting. Returns `None` when the pivot falls below `singular_tol`.
pub fn solve_linear<F: Scalar>(a: &DenseMatrix<F>, b: &[F], singular_tol: F) -> Option<Vec<F>> {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut m: Vec<Vec<F>> = (0..n)
        .map(|r| {
            let mut row = a.row(r).to_vec();
            row.push(b[r]);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            m[i][col]
                .abs()
                .partial_cmp(&m[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[pivot][col].abs() <= singular_tol {
            return None;
        }
        m.swap(col, pivot);
        for r in col + 1..n {
            let factor = m[r][col] / m[col][col];
            if factor == F::zero() {
                continue;
            }
            for c in col..=n {
                let v = m[col][c];
                m[r][c] = m[r][c] - factor * v;
            }
        }
    }
    let mut x = vec![F::zero(); n];
    for r in (0..n).rev() {
        let mut acc = m[r][n];
        for c in r + 1..n {
            acc = acc - m[r][c] * x[c];
        }
        x[r] = acc / m[r][r];
    }
    Some(x)
}
