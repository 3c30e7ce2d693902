//! Minimal dense f32 kernel.
//!
//! Only matrix products are counted by [`OpCounter`]. Softmax, layer norm,
//! GELU and bias adds are deliberately left out so that the instrumented
//! count and the closed-form model in [`crate::cost`] use one convention.

use std::sync::atomic::{AtomicU64, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f32 = 1e-6;

/// Row-major f32 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, and a zero-width matrix has no meaningful rows anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
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

    /// Copies columns `start..end` into a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for row in self.iter_rows() {
            data.extend_from_slice(&row[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        assert!(start + block.cols <= self.cols);
        for r in 0..self.rows {
            let dst = r * self.cols + start;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(r));
        }
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(
                "Matrix::push_row",
                format!("row of {} values, expected {}", row.len(), self.cols),
            ));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias of {} for {} columns", bias.len(), self.cols),
            ));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for x in &mut self.data {
            *x *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Multiply-accumulate counter shared by every matmul of one forward pass.
#[derive(Debug, Default)]
pub struct OpCounter {
    macs: AtomicU64,
    enabled: bool,
}

impl OpCounter {
    pub fn new(enabled: bool) -> Self {
        OpCounter {
            macs: AtomicU64::new(0),
            enabled,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn macs(&self) -> u64 {
        self.macs.load(Ordering::Relaxed)
    }

    pub fn add(&self, macs: u64) {
        if self.enabled {
            self.macs.fetch_add(macs, Ordering::Relaxed);
        }
    }

    pub fn reset(&self) {
        self.macs.store(0, Ordering::Relaxed);
    }
}

/// Which matmul / per-head loop implementation to use.
///
/// `Parallel` only differs from `Sequential` when the crate is built with
/// the `parallel` feature; otherwise it runs the sequential loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Sequential,
    Parallel,
}

impl Default for Backend {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Backend::Parallel
        } else {
            Backend::Sequential
        }
    }
}

impl Backend {
    /// Whether this backend actually fans work out to the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Backend::Parallel
    }
}

/// Execution context for one forward pass: backend choice plus MAC counter.
#[derive(Debug, Default)]
pub struct Exec {
    pub backend: Backend,
    pub counter: OpCounter,
}

impl Exec {
    pub fn new(backend: Backend) -> Self {
        Exec {
            backend,
            counter: OpCounter::new(false),
        }
    }

    /// Default backend with MAC counting switched on.
    pub fn counting() -> Self {
        Exec {
            backend: Backend::default(),
            counter: OpCounter::new(true),
        }
    }

    pub fn with_counting(backend: Backend) -> Self {
        Exec {
            backend,
            counter: OpCounter::new(true),
        }
    }

    pub fn macs(&self) -> u64 {
        self.counter.macs()
    }

    pub fn matmul(&self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.cols != b.rows {
            return Err(Error::shape(
                "matmul",
                format!("({}x{}) . ({}x{})", a.rows, a.cols, b.rows, b.cols),
            ));
        }
        let mut out = Matrix::zeros(a.rows, b.cols);
        if b.cols > 0 {
            if self.backend.is_parallel() {
                matmul_par(a, b, &mut out);
            } else {
                matmul_seq(a, b, &mut out);
            }
        }
        self.counter
            .add(a.rows as u64 * a.cols as u64 * b.cols as u64);
        Ok(out)
    }

    /// Maps `f` over `0..n`, fanning out when the backend is parallel.
    /// Output order always follows the index order.
    pub fn map_indices<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.backend.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}

#[inline]
fn matmul_row(a_row: &[f32], b: &Matrix, out_row: &mut [f32]) {
    for (k, &aik) in a_row.iter().enumerate() {
        let b_row = b.row(k);
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

fn matmul_seq(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let n = b.cols;
    for (i, out_row) in out.data.chunks_exact_mut(n).enumerate() {
        matmul_row(a.row(i), b, out_row);
    }
}

#[cfg(feature = "parallel")]
fn matmul_par(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let n = b.cols;
    out.data
        .par_chunks_exact_mut(n)
        .enumerate()
        .for_each(|(i, out_row)| matmul_row(a.row(i), b, out_row));
}

#[cfg(not(feature = "parallel"))]
fn matmul_par(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    matmul_seq(a, b, out)
}

/// Uncounted product on the default backend.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Exec::default().matmul(a, b)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub fn softmax_rows_in_place(m: &mut Matrix) {
    let cols = m.cols;
    if cols == 0 {
        return;
    }
    for row in m.data.chunks_exact_mut(cols) {
        softmax_slice(row);
    }
}

pub(crate) fn softmax_slice(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Per-row normalisation to zero mean / unit variance, then `gamma * x + beta`.
pub fn layernorm(m: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    if gamma.len() != m.cols || beta.len() != m.cols {
        return Err(Error::shape(
            "layernorm",
            format!(
                "gamma {} / beta {} for {} columns",
                gamma.len(),
                beta.len(),
                m.cols
            ),
        ));
    }
    let mut out = m.clone();
    if m.cols == 0 {
        return Ok(out);
    }
    let n = m.cols as f32;
    for row in out.data.chunks_exact_mut(m.cols) {
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
        let denom = (var + eps).sqrt();
        // constant row with eps = 0
        let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        for ((x, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *x = (*x - mean) * inv * g + b;
        }
    }
    Ok(out)
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// tanh-approximated GELU.
pub fn gelu_scalar(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    gelu_in_place(&mut out);
    out
}

pub fn gelu_in_place(m: &mut Matrix) {
    for x in &mut m.data {
        *x = gelu_scalar(*x);
    }
}
