use std::ops::{Index, IndexMut};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major dense matrix of f64 values.
///
/// All numeric state in this crate (point coordinates, colors, network
/// weights, feature responses, Gram matrices) lives in this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Work threshold above which matmul parallelizes over output rows.
/// Below it the rayon dispatch overhead dominates.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "matrix construction",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty {
                context: "matrix from_rows",
            });
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument(
                "matrix from_rows: ragged row lengths".into(),
            ));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// Internal constructor for values produced by trusted arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
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

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Standard matrix product. Parallelizes over output rows for large
    /// operands; per-element summation order is fixed, so results are
    /// deterministic regardless of thread count.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let n = rhs.cols;
        let k = self.cols;
        let mut data = vec![0.0; self.rows * n];
        let kernel = |i: usize, out_row: &mut [f64]| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += aik * b;
                }
            }
        };
        if self.rows * k * n >= PAR_FLOP_THRESHOLD && self.rows > 1 {
            data.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| kernel(i, out_row));
        } else {
            for (i, out_row) in data.chunks_mut(n).enumerate() {
                kernel(i, out_row);
            }
        }
        Ok(Matrix::from_raw(self.rows, n, data))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "matrix add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "matrix sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "matrix hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        rhs: &Matrix,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                context,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Adds `delta` into `self` in place; shapes must already agree.
    pub(crate) fn add_assign(&mut self, delta: &Matrix) {
        debug_assert_eq!(self.shape(), delta.shape());
        for (a, b) in self.data.iter_mut().zip(&delta.data) {
            *a += b;
        }
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn col_means(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.col_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Squared Frobenius norm, summed in row-major order.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Column-wise maximum as a 1xC matrix; errors on an empty matrix.
    pub fn rowwise_max(&self) -> Result<Matrix> {
        if self.rows == 0 {
            return Err(Error::Empty {
                context: "rowwise_max",
            });
        }
        let (maxima, _) = self.rowwise_max_with_argmax()?;
        Ok(maxima)
    }

    /// Column maxima plus the row index attaining each (ties: lowest index).
    pub fn rowwise_max_with_argmax(&self) -> Result<(Matrix, Vec<usize>)> {
        if self.rows == 0 {
            return Err(Error::Empty {
                context: "rowwise_max",
            });
        }
        let mut maxima = self.row(0).to_vec();
        let mut argmax = vec![0usize; self.cols];
        for i in 1..self.rows {
            for (j, &v) in self.row(i).iter().enumerate() {
                if v > maxima[j] {
                    maxima[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok((Matrix::from_raw(1, self.cols, maxima), argmax))
    }

    /// Horizontal concatenation: [self | rhs].
    pub fn hstack(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch {
                context: "hstack",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let cols = self.cols + rhs.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(rhs.row(i));
        }
        Ok(Matrix::from_raw(self.rows, cols, data))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        if parts.is_empty() {
            return Err(Error::Empty { context: "vstack" });
        }
        let cols = parts[0].cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::ShapeMismatch {
                    context: "vstack",
                    left: (parts[0].rows, cols),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Copies `cols` columns starting at `start` into a new matrix.
    pub fn slice_cols(&self, start: usize, cols: usize) -> Matrix {
        debug_assert!(start + cols <= self.cols);
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend_from_slice(&row[start..start + cols]);
        }
        Matrix::from_raw(self.rows, cols, data)
    }

    /// Copies `count` rows starting at `start` into a new matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Matrix {
        debug_assert!(start + count <= self.rows);
        let data = self.data[start * self.cols..(start + count) * self.cols].to_vec();
        Matrix::from_raw(count, self.cols, data)
    }

    /// Returns a copy with rows reordered as `perm` (row i of the result is
    /// row perm[i] of self).
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Matrix> {
        if perm.len() != self.rows {
            return Err(Error::InvalidArgument(format!(
                "permutation length {} does not match row count {}",
                perm.len(),
                self.rows
            )));
        }
        Ok(self.select_rows(perm))
    }

    /// Copies the given rows (any count, any order) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry-wise difference; shapes must agree.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Gram matrix of feature columns: G_ij is the inner product of columns i
/// and j. Computed over column pairs (i <= j) and mirrored, so the result
/// is exactly symmetric. `per_point` divides by the row count.
pub fn gram(features: &Matrix, per_point: bool) -> Result<Matrix> {
    if features.rows() == 0 {
        return Err(Error::Empty { context: "gram" });
    }
    let n = features.rows();
    let m = features.cols();
    let norm = if per_point { 1.0 / n as f64 } else { 1.0 };
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0;
            for k in 0..n {
                let row = features.row(k);
                acc += row[i] * row[j];
            }
            let v = acc * norm;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}
