//! Dense row-major matrices and the handful of vector kernels the rest of the
//! crate needs. Everything is `f64`; reductions run left to right so results are
//! reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest norm accepted by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, found: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
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

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape as `self`, zero filled.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    /// Mean of all rows. Panics on an empty matrix.
    pub fn row_mean(&self) -> Vec<f64> {
        assert!(self.rows > 0, "row_mean of empty matrix");
        let mut acc = vec![0.0; self.cols];
        for r in self.iter_rows() {
            axpy(1.0, r, &mut acc);
        }
        let inv = 1.0 / self.rows as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        acc
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}

/// Scales `v` to unit Euclidean norm.
///
/// ```
/// use sonar_core::linalg::l2_normalize;
/// assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
/// assert!(l2_normalize(&[0.0, 0.0]).is_err());
/// ```
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= MIN_NORM) {
        return Err(Error::DegenerateVector { norm: n, min: MIN_NORM });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity; errors if either side is degenerate.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if !(na >= MIN_NORM) {
        return Err(Error::DegenerateVector { norm: na, min: MIN_NORM });
    }
    if !(nb >= MIN_NORM) {
        return Err(Error::DegenerateVector { norm: nb, min: MIN_NORM });
    }
    Ok(dot(a, b) / (na * nb))
}

/// Backpropagates through `u = v / |v|`: given `dL/du`, returns `dL/dv`.
///
/// `dL/dv = (g - u (u . g)) / |v|`
pub fn l2_normalize_backward(v: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let n = norm(v);
    let u: Vec<f64> = v.iter().map(|x| x / n).collect();
    let ug = dot(&u, grad_unit);
    grad_unit.iter().zip(&u).map(|(g, ui)| (g - ui * ug) / n).collect()
}

/// Gradient of `cos(a, b)` with respect to `a`.
pub fn cosine_grad_a(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    a.iter().zip(b).map(|(ai, bi)| bi / (na * nb) - c * ai / (na * na)).collect()
}

/// Numerically stable `ln(sum(exp(x)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().fold(0.0, |acc, x| acc + (x - m).exp()).ln()
}

/// Softmax of `xs` into a new vector.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}
