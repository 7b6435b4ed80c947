//! Dense row-major `f64` matrices and the handful of exact solves the rest of
//! the crate is built on.
//!
//! Nothing in here ever forms an explicit inverse. Every `X = A⁻¹·B` is a
//! Cholesky factorization followed by two triangular sweeps, which is what
//! keeps the recursive aggregation within a few ulps of the pooled oracle.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric (|a_ij - a_ji| = {asymmetry:e} at ({row}, {col}))")]
    NotSymmetric { row: usize, col: usize, asymmetry: f64 },
    #[error("regularization must be a finite non-negative number, got {0}")]
    BadGamma(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// A dense, row-major matrix of finite `f64` values.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for v in self.row(r).iter().take(8) {
                write!(f, "{v:>12.6e} ")?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength { rows, cols, len: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { row: pos / cols.max(1), col: pos % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    /// Skips the finiteness scan. Only for results of arithmetic on already
    /// validated matrices.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Convenience constructor for small literal matrices. Panics on ragged
    /// input, so it is meant for tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_raw(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Position of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        let cols = self.cols.max(1);
        self.data.iter().position(|v| !v.is_finite()).map(|p| (p / cols, p % cols))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        if rhs.cols == 0 {
            return Ok(out);
        }
        if rhs.cols < NARROW {
            let bt = rhs.transpose();
            for i in 0..self.rows {
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] = dot(self.row(i), bt.row(j));
                }
            }
            return Ok(out);
        }
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(out_row, a, rhs.row(k));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "t_matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        if rhs.cols == 0 {
            return Ok(out);
        }
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = rhs.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(&mut out.data[i * rhs.cols..(i + 1) * rhs.cols], a, b_row);
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    /// Adds `s` to every diagonal entry in place.
    pub fn add_diagonal(&mut self, s: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += s;
        }
    }

    /// Replaces `M` by `(M + Mᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        debug_assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Horizontal concatenation `[self rhs]`.
    pub fn hstack(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "hstack",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let cols = self.cols + rhs.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(rhs.row(r));
        }
        Ok(Matrix::from_raw(self.rows, cols, data))
    }

    /// Vertical concatenation of matrices sharing a column count.
    pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(LinalgError::DimensionMismatch {
                    op: "vstack",
                    lhs: (rows, cols),
                    rhs: b.shape(),
                });
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    /// New matrix made of the given columns, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, indices.len(), |r, c| self[(r, indices[c])])
    }

    /// Columns `[start, end)`.
    pub fn column_range(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |r, c| self[(r, start + c)])
    }

    fn check_same_shape(&self, rhs: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::DimensionMismatch { op, lhs: self.shape(), rhs: rhs.shape() });
        }
        Ok(())
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(rhs, op)?;
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Relative tolerance for the symmetry check on factorization input.
const SYMMETRY_RTOL: f64 = 1e-10;

/// Cholesky factor `A = L·Lᵀ` of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    n: usize,
    /// Lower triangle, row-major, full `n×n` storage.
    lower: Vec<f64>,
}

const CHOLESKY_BLOCK: usize = 32;

/// Right-hand sides narrower than this take the dot-product paths.
const NARROW: usize = 4;

impl SpdFactor {
    /// Factorizes `a`. Pivots that fall below `n·ε·max(diag)` are treated as
    /// zero so that a rank-deficient Gram matrix is reported rather than
    /// factorized on round-off noise.
    pub fn new(a: &Matrix) -> Result<Self> {
        if !a.is_square() || a.rows == 0 {
            return Err(LinalgError::DimensionMismatch {
                op: "cholesky",
                lhs: a.shape(),
                rhs: (a.rows, a.rows),
            });
        }
        let n = a.rows;
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in (i + 1)..n {
                let asym = (a[(i, j)] - a[(j, i)]).abs();
                if asym > SYMMETRY_RTOL * scale {
                    return Err(LinalgError::NotSymmetric { row: i, col: j, asymmetry: asym });
                }
            }
        }
        let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
        let floor = max_diag * (n as f64) * f64::EPSILON;

        // Row-blocked so each finished row is reused by a whole block of
        // rows while it is in cache. Same dot products, same order.
        let mut lower = vec![0.0; n * n];
        for i0 in (0..n).step_by(CHOLESKY_BLOCK) {
            let i1 = (i0 + CHOLESKY_BLOCK).min(n);
            for j in 0..i1 {
                for i in j.max(i0)..i1 {
                    let (prev, cur) = lower.split_at_mut(i * n);
                    let li = &mut cur[..n];
                    if i == j {
                        let s = a[(i, i)] - dot(&li[..i], &li[..i]);
                        if !s.is_finite() || s <= floor {
                            return Err(LinalgError::NotPositiveDefinite { index: i, pivot: s });
                        }
                        li[i] = s.sqrt();
                    } else {
                        let lj = &prev[j * n..j * n + j + 1];
                        li[j] = (a[(i, j)] - dot(&li[..j], &lj[..j])) / lj[j];
                    }
                }
            }
        }
        Ok(Self { n, lower })
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    /// Solves `A·X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if b.rows != n {
            return Err(LinalgError::DimensionMismatch {
                op: "spd_solve",
                lhs: (n, n),
                rhs: b.shape(),
            });
        }
        let m = b.cols;
        let mut x = b.clone();
        if m == 0 {
            return Ok(x);
        }
        if m < NARROW {
            let mut xt = b.transpose();
            for j in 0..m {
                self.solve_vector(xt.row_mut(j));
            }
            return Ok(xt.transpose());
        }
        // L·Y = B, row by row.
        for i in 0..n {
            let li = &self.lower[i * n..i * n + i];
            let (done, rest) = x.data.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for (k, &l) in li.iter().enumerate() {
                if l != 0.0 {
                    axpy(xi, -l, &done[k * m..(k + 1) * m]);
                }
            }
            let d = self.lower[i * n + i];
            xi.iter_mut().for_each(|v| *v /= d);
        }
        // Lᵀ·X = Y, eliminating column-wise so L is read along its rows.
        for i in (0..n).rev() {
            let d = self.lower[i * n + i];
            let (before, rest) = x.data.split_at_mut(i * m);
            let xi = &mut rest[..m];
            xi.iter_mut().for_each(|v| *v /= d);
            let li = &self.lower[i * n..i * n + i];
            for (k, &l) in li.iter().enumerate() {
                if l != 0.0 {
                    axpy(&mut before[k * m..(k + 1) * m], -l, xi);
                }
            }
        }
        Ok(x)
    }
}

impl SpdFactor {
    /// In-place solve for a single right-hand side.
    fn solve_vector(&self, y: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i + 1];
            y[i] = (y[i] - dot(&row[..i], &y[..i])) / row[i];
        }
        for i in (0..n).rev() {
            let row = &self.lower[i * n..i * n + i + 1];
            y[i] /= row[i];
            let xi = y[i];
            if xi != 0.0 {
                axpy(&mut y[..i], -xi, &row[..i]);
            }
        }
    }
}

/// `Fᵀ·F + γ·I`, exactly symmetric.
pub fn gram_regularized(features: &Matrix, gamma: f64) -> Result<Matrix> {
    check_gamma(gamma)?;
    let l = features.cols;
    let mut g = Matrix::zeros(l, l);
    for r in 0..features.rows {
        let f = features.row(r);
        for (a, &fa) in f.iter().enumerate() {
            if fa == 0.0 {
                continue;
            }
            axpy(&mut g.data[a * l + a..(a + 1) * l], fa, &f[a..]);
        }
    }
    // Only the upper triangle was accumulated; mirror it.
    for i in 0..l {
        for j in (i + 1)..l {
            g.data[j * l + i] = g.data[i * l + j];
        }
    }
    g.add_diagonal(gamma);
    Ok(g)
}

/// Solves `A·X = B` for symmetric positive definite `A`.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    SpdFactor::new(a)?.solve(b)
}

/// Closed-form ridge estimator `(FᵀF + γI)⁻¹FᵀY`.
pub fn ridge_solve(features: &Matrix, targets: &Matrix, gamma: f64) -> Result<Matrix> {
    if features.rows != targets.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "ridge_solve",
            lhs: features.shape(),
            rhs: targets.shape(),
        });
    }
    let gram = gram_regularized(features, gamma)?;
    let rhs = features.t_matmul(targets)?;
    spd_solve(&gram, &rhs)
}

/// `‖A − B‖_F / max(‖B‖_F, 1e-300)`.
pub fn frobenius_rel_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(diff.frobenius_norm() / b.frobenius_norm().max(1e-300))
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(LinalgError::BadGamma(gamma))
    }
}

#[cfg(test)]
pub(crate) fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
    let diff = a.sub(b).unwrap_or_else(|e| panic!("{e}"));
    assert!(diff.max_abs() <= tol, "max deviation {:e} > {tol:e}\n{a:?}\n{b:?}", diff.max_abs());
}
