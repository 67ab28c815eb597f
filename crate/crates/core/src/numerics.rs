//! Dense row-major matrices and the handful of kernels the attention code
//! needs, plus an instrumented multiplication counter.
//!
//! Rows are time frames and columns are feature dimensions throughout the
//! crate. All arithmetic is `f64` and every reduction runs in a fixed order,
//! so results are bit-reproducible.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result, Shape};

/// Layer-norm epsilon for 64-bit evaluation.
pub const LAYER_NORM_EPS_F64: f64 = 1e-12;
/// Layer-norm epsilon when the run is configured for 32-bit output.
pub const LAYER_NORM_EPS_F32: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// A `rows x cols` matrix of zeros. Zero rows is allowed, zero columns is not.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols >= 1, "matrix must have at least one column");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::InvalidConfig("matrix must have at least one column".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                left: Shape(rows, cols),
                right: Shape(data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "from_rows",
                    left: Shape(1, cols),
                    right: Shape(1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        Shape(self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    /// Contiguous block of rows `[start, end)` as raw row-major data.
    pub fn rows_slice(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.cols..end * self.cols]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.rows_slice(start, end).to_vec(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        assert!(self.rows > 0, "cannot transpose a matrix without rows");
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "add_row_vector",
                left: self.shape(),
                right: Shape(1, bias.len()),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Largest absolute elementwise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Counter of scalar multiplications spent in "counted" operations.
///
/// Only two categories are ever charged: query-key score products inside
/// attention, and every matrix product of the dilation post-processing
/// network. Value aggregation, projections and encoder feed-forward layers
/// are free. Under that convention the instrumented totals coincide with the
/// closed-form cost model in [`crate::complexity`].
#[derive(Debug, Default)]
pub struct MultiplyLedger {
    counted: AtomicU64,
}

impl MultiplyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.counted.fetch_add(n, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.counted.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.counted.store(0, Ordering::Relaxed);
    }
}

pub(crate) fn charge(ledger: Option<&MultiplyLedger>, n: usize) {
    if let Some(l) = ledger {
        l.add(n as u64);
    }
}

/// Uncounted matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_tracked(a, b, None)
}

/// Matrix product that charges `a.rows * a.cols * b.cols` to `ledger` when one is given.
pub fn matmul_tracked(a: &Matrix, b: &Matrix, ledger: Option<&MultiplyLedger>) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let o_row = &mut out.data[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    charge(ledger, n * k * m);
    Ok(out)
}

/// Row-vector times matrix, `x (1 x k) * b (k x m)`, written into `out`.
pub(crate) fn vecmat(x: &[f64], b: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), b.rows);
    debug_assert_eq!(out.len(), b.cols);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (p, &x_p) in x.iter().enumerate() {
        for (o, &b_pj) in out.iter_mut().zip(b.row(p)) {
            *o += x_p * b_pj;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place max-subtracted softmax of one score vector.
pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

pub fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Per-row normalization to zero mean and unit variance followed by the
/// affine map `gain * x + bias`.
pub fn layer_norm(m: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(Error::DimensionMismatch {
            op: "layer_norm",
            left: m.shape(),
            right: Shape(gain.len(), bias.len()),
        });
    }
    let d = m.cols as f64;
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
        let denom = (var + eps).sqrt();
        for ((x, g), b) in row.iter_mut().zip(gain).zip(bias) {
            let centered = *x - mean;
            // zero-variance rows with eps = 0 map to zero rather than NaN
            let normed = if denom > 0.0 { centered / denom } else { 0.0 };
            *x = g * normed + b;
        }
    }
    Ok(out)
}

/// Sinusoidal position table: `PE[n, 2i] = sin(n / 10000^(2i/d))`,
/// `PE[n, 2i+1] = cos(...)`, frames zero-based.
pub fn sinusoidal_pe(n_frames: usize, d_model: usize) -> Result<Matrix> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "positional encoding needs an even, non-zero d_model (got {d_model})"
        )));
    }
    let mut pe = Matrix::zeros(n_frames, d_model);
    for n in 0..n_frames {
        for i in 0..d_model / 2 {
            let angle = n as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            pe.set(n, 2 * i, angle.sin());
            pe.set(n, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// Central-difference gradient of a scalar function, one entry at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows, x.cols);
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|x| x.max(0.0))
}

/// Stacks matrices along the time (row) axis.
pub fn concat_time(parts: &[&Matrix]) -> Result<Matrix> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidConfig("concat_time of nothing".into()));
    };
    let cols = first.cols;
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols != cols {
            return Err(Error::DimensionMismatch {
                op: "concat_time",
                left: first.shape(),
                right: p.shape(),
            });
        }
        data.extend_from_slice(&p.data);
        rows += p.rows;
    }
    Matrix::from_vec(rows, cols, data)
}

/// Stacks matrices along the feature (column) axis.
pub fn concat_feature(parts: &[&Matrix]) -> Result<Matrix> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidConfig("concat_feature of nothing".into()));
    };
    let rows = first.rows;
    let mut cols = 0;
    for p in parts {
        if p.rows != rows {
            return Err(Error::DimensionMismatch {
                op: "concat_feature",
                left: first.shape(),
                right: p.shape(),
            });
        }
        cols += p.cols;
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut offset = 0;
        for p in parts {
            out.row_mut(r)[offset..offset + p.cols].copy_from_slice(p.row(r));
            offset += p.cols;
        }
    }
    Ok(out)
}

/// Deterministic Gaussian matrix with standard deviation `std`.
pub fn seeded_gaussian(rows: usize, cols: usize, seed: u64, std: f64) -> Matrix {
    seeded_gaussian_stream(rows, cols, seed, 0, std)
}

/// Like [`seeded_gaussian`] but drawn from an independent ChaCha stream, so
/// tensors initialised from one seed do not share samples.
pub fn seeded_gaussian_stream(rows: usize, cols: usize, seed: u64, stream: u64, std: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Matrix { rows, cols, data }
}
