//! Dense linear-algebra kernels: matrix multiply, row softmax, RMS
//! normalization, and 1-D max pooling, all in 64-bit floats.
//!
//! Every exported operation leaves only finite entries in its output, and
//! multiply-heavy kernels can report their multiply-add volume through an
//! [`OpCounter`] so callers can account for compute in closed form.

use crate::error::{EngineError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EngineError::Shape(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix by evaluating `f(row, col)` at every position.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous rows `[start, start + count)` as a new matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Matrix {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// New matrix holding the given rows of `self`, in the order listed.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Stacks `self` on top of `other`; column counts must match.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(EngineError::Shape(format!(
                "vstack of {}-col and {}-col matrices",
                self.cols, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Columns `[start, start + width)` of `self` as a new matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `block` into columns `[start, start + block.cols)` of `self`.
    pub fn set_cols(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(self.rows, block.rows);
        let cols = self.cols;
        for r in 0..self.rows {
            self.data[r * cols + start..r * cols + start + block.cols]
                .copy_from_slice(block.row(r));
        }
    }

    /// Uncounted product; see [`matmul`] for the counted variant.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        let mut disabled = OpCounter::disabled();
        matmul(self, other, &mut disabled)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(EngineError::Shape(format!(
                "add of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Frobenius norm (L2 norm of the flattened entries).
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Tally of fused multiply-add operations performed by counted kernels.
///
/// The tally is monotonically non-decreasing within a run and stays at zero
/// while disabled. One counter belongs to one run context; it is not shared
/// across threads.
#[derive(Debug, Clone)]
pub struct OpCounter {
    multiply_adds: u64,
    enabled: bool,
}

impl OpCounter {
    pub fn enabled() -> Self {
        OpCounter {
            multiply_adds: 0,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        OpCounter {
            multiply_adds: 0,
            enabled: false,
        }
    }

    pub fn record(&mut self, multiply_adds: u64) {
        if self.enabled {
            self.multiply_adds += multiply_adds;
        }
    }

    pub fn multiply_adds(&self) -> u64 {
        self.multiply_adds
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }
}

/// Matrix product `a @ b`, counting `a.rows * a.cols * b.cols` multiply-adds.
pub fn matmul(a: &Matrix, b: &Matrix, counter: &mut OpCounter) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(EngineError::Shape(format!(
            "matmul of {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    counter.record((a.rows * a.cols * b.cols) as u64);

    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    // i-k-j ordering: the inner loop walks contiguous rows of `b` and `out`,
    // which the compiler vectorizes.
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(out)
}

/// Numerically stable row softmax: subtracts the row max before
/// exponentiating, so constant shifts of a row leave the output unchanged.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise RMS normalization without learned gain.
pub fn rms_norm_rows(a: &Matrix) -> Matrix {
    const EPS: f64 = 1e-6;
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (mean_sq + EPS).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// 1-D max pooling with odd kernel size and same-length output.
///
/// Position `i` takes the max over the window `[i - k/2, i + k/2]`;
/// out-of-range positions are treated as negative infinity so padding can
/// never win over a real score.
pub fn maxpool_1d(scores: &[f64], kernel_size: usize) -> Result<Vec<f64>> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(EngineError::Config(format!(
            "kernel_size: must be odd and >= 1, got {kernel_size}"
        )));
    }
    let half = kernel_size / 2;
    let n = scores.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        let m = scores[lo..hi]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(m);
    }
    Ok(out)
}
