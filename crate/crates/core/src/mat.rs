//! Dense row-major real matrices and RGB images.
//!
//! Heavy products are delegated to `faer` through zero-copy views; everything
//! else is plain loops over the row-major buffer.

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Whether an operand enters a product as-is or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

impl Mat {
    /// Builds a matrix from row-major data, checking shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::invalid(format!("dimension overflow: {rows}x{cols}")))?;
        if data.len() != len {
            return Err(Error::invalid(format!(
                "expected {len} entries for {rows}x{cols}, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Internal constructor for buffers produced by this crate's own kernels.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert!(rows > 0 && cols > 0);
        debug_assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Mat::from_vec(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Mat::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat::from_raw(rows, cols, data)
    }

    /// Column vector (n x 1).
    pub fn column(values: &[f64]) -> Result<Self> {
        Mat::from_vec(values.len(), 1, values.to_vec())
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

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_col(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self.set(i, j, v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn view(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }

    pub(crate) fn view_mut(&mut self) -> MatMut<'_, f64> {
        MatMut::from_row_major_slice_mut(&mut self.data, self.rows, self.cols)
    }

    pub(crate) fn from_faer(m: MatRef<'_, f64>) -> Self {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    pub fn transpose(&self) -> Mat {
        let mut out = vec![0.0; self.data.len()];
        // blocked to keep both sides cache-resident on large frames
        const B: usize = 32;
        for ib in (0..self.rows).step_by(B) {
            for jb in (0..self.cols).step_by(B) {
                for i in ib..(ib + B).min(self.rows) {
                    for j in jb..(jb + B).min(self.cols) {
                        out[j * self.rows + i] = self.data[i * self.cols + j];
                    }
                }
            }
        }
        Mat::from_raw(self.cols, self.rows, out)
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        gemm(self, Op::N, rhs, Op::N)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, rhs: &Mat, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        self.check_same_shape(rhs, what)?;
        Ok(Mat::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    /// `self += alpha * rhs`
    pub fn axpy(&mut self, alpha: f64, rhs: &Mat) -> Result<()> {
        self.check_same_shape(rhs, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Row sums, i.e. `self * 1`.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, rhs: &Mat) -> Result<f64> {
        self.check_same_shape(rhs, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `||self - rhs||_F / ||rhs||_F`, falling back to the absolute error when `rhs` is zero.
    pub fn rel_error(&self, reference: &Mat) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let denom = reference.frobenius_norm();
        Ok(if denom > 0.0 { diff / denom } else { diff })
    }

    pub(crate) fn check_same_shape(&self, rhs: &Mat, what: &str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }
}

fn op_shape(m: &Mat, op: Op) -> (usize, usize) {
    match op {
        Op::N => (m.rows, m.cols),
        Op::T => (m.cols, m.rows),
    }
}

/// `op(a) * op(b)` using a single-threaded kernel so results do not depend on
/// the thread pool.
pub fn gemm(a: &Mat, op_a: Op, b: &Mat, op_b: Op) -> Result<Mat> {
    let (m, k) = op_shape(a, op_a);
    let (k2, n) = op_shape(b, op_b);
    if k != k2 {
        return Err(Error::invalid(format!(
            "matmul: inner dimensions differ ({m}x{k} * {k2}x{n})"
        )));
    }
    let lhs = match op_a {
        Op::N => a.view(),
        Op::T => a.view().transpose(),
    };
    let rhs = match op_b {
        Op::N => b.view(),
        Op::T => b.view().transpose(),
    };
    let mut out = Mat::zeros(m, n);
    matmul(out.view_mut(), Accum::Replace, lhs, rhs, 1.0, Par::Seq);
    Ok(out)
}

/// `left * x * right^T`, the separable operator shape used throughout.
pub fn sandwich(left: &Mat, x: &Mat, right: &Mat) -> Result<Mat> {
    if left.cols != x.rows || right.cols != x.cols {
        return Err(Error::invalid(format!(
            "sandwich: {}x{} * {}x{} * ({}x{})^T is not conformable",
            left.rows, left.cols, x.rows, x.cols, right.rows, right.cols
        )));
    }
    // Associate so the intermediate is the smaller of the two options.
    let cost_left_first = left.rows * left.cols * x.cols + left.rows * x.cols * right.rows;
    let cost_right_first = x.rows * x.cols * right.rows + left.rows * left.cols * right.rows;
    if cost_left_first <= cost_right_first {
        let t = gemm(left, Op::N, x, Op::N)?;
        gemm(&t, Op::N, right, Op::T)
    } else {
        let t = gemm(x, Op::N, right, Op::T)?;
        gemm(left, Op::N, &t, Op::N)
    }
}

/// `left^T * x * right`, the adjoint of [`sandwich`].
pub fn sandwich_adjoint(left: &Mat, x: &Mat, right: &Mat) -> Result<Mat> {
    if left.rows != x.rows || right.rows != x.cols {
        return Err(Error::invalid(format!(
            "sandwich_adjoint: ({}x{})^T * {}x{} * {}x{} is not conformable",
            left.rows, left.cols, x.rows, x.cols, right.rows, right.cols
        )));
    }
    let cost_left_first = left.cols * left.rows * x.cols + left.cols * x.cols * right.cols;
    let cost_right_first = x.rows * x.cols * right.cols + left.cols * left.rows * right.cols;
    if cost_left_first <= cost_right_first {
        let t = gemm(left, Op::T, x, Op::N)?;
        gemm(&t, Op::N, right, Op::N)
    } else {
        let t = gemm(x, Op::N, right, Op::N)?;
        gemm(left, Op::T, &t, Op::N)
    }
}

/// Three-plane colour image; channels are processed independently.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    channels: [Mat; 3],
}

impl ImageRGB {
    pub fn new(r: Mat, g: Mat, b: Mat) -> Result<Self> {
        if r.shape() != g.shape() || r.shape() != b.shape() {
            return Err(Error::invalid("image planes must share dimensions"));
        }
        for (name, plane) in ["red", "green", "blue"].iter().zip([&r, &g, &b]) {
            if plane.min() < 0.0 || plane.max() > 1.0 {
                return Err(Error::invalid(format!("{name} plane has values outside [0, 1]")));
            }
        }
        Ok(ImageRGB { channels: [r, g, b] })
    }

    /// Like [`ImageRGB::new`] but clamps every plane into `[0, 1]` first.
    pub fn clamped(r: Mat, g: Mat, b: Mat) -> Result<Self> {
        let c = |m: Mat| m.map(|v| v.clamp(0.0, 1.0));
        ImageRGB::new(c(r), c(g), c(b))
    }

    pub fn from_gray(m: &Mat) -> Result<Self> {
        ImageRGB::new(m.clone(), m.clone(), m.clone())
    }

    pub fn height(&self) -> usize {
        self.channels[0].rows()
    }

    pub fn width(&self) -> usize {
        self.channels[0].cols()
    }

    pub fn channel(&self, c: usize) -> &Mat {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Mat; 3] {
        &self.channels
    }

    pub fn into_channels(self) -> [Mat; 3] {
        self.channels
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        [
            self.channels[0].get(i, j),
            self.channels[1].get(i, j),
            self.channels[2].get(i, j),
        ]
    }

    /// Per-pixel mean of the three channels.
    pub fn luminance(&self) -> Mat {
        let (h, w) = self.channels[0].shape();
        Mat::from_fn(h, w, |i, j| self.pixel(i, j).iter().sum::<f64>() / 3.0)
    }
}
