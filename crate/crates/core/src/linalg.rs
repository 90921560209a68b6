//! Dense row-major matrices and the SVD-backed least-squares solve.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative cutoff below which singular values are treated as zero.
pub const PINV_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape("shape mismatch in subtraction".into()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }
}

/// Moore-Penrose pseudo-inverse via SVD, zeroing singular values below
/// `rcond · σ_max`.
pub fn pseudo_inverse(a: &Matrix, rcond: f64) -> Result<Matrix> {
    if !a.is_finite() {
        return Err(Error::Numeric("pseudo-inverse of a matrix with non-finite entries".into()));
    }
    if a.rows == 0 || a.cols == 0 {
        return Ok(Matrix::zeros(a.cols, a.rows));
    }
    let svd = a
        .to_faer()
        .thin_svd()
        .map_err(|e| Error::Numeric(format!("SVD did not converge: {e:?}")))?;
    let (u, sigma, v) = (svd.U(), svd.S(), svd.V());
    let k = a.rows.min(a.cols);
    let sigma: Vec<f64> = (0..k).map(|i| sigma[i]).collect();
    let cutoff = rcond * sigma.iter().copied().fold(0.0, f64::max);
    // pinv = V Σ⁺ Uᵀ
    let mut out = Matrix::zeros(a.cols, a.rows);
    for (i, &s) in sigma.iter().enumerate() {
        if !(s > cutoff && s > 0.0) {
            continue;
        }
        let inv = 1.0 / s;
        for r in 0..a.cols {
            let vr = v[(r, i)] * inv;
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o += vr * u[(c, i)];
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric("pseudo-inverse produced non-finite values".into()));
    }
    Ok(out)
}

/// Minimum-norm least-squares solution of `a · x = b`.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "system has {} equations but {} right-hand-side rows",
            a.rows, b.rows
        )));
    }
    if !b.is_finite() {
        return Err(Error::Numeric("right-hand side has non-finite entries".into()));
    }
    pseudo_inverse(a, PINV_RCOND)?.matmul(b)
}
