//! Dense 2-D tensor arithmetic in f64.
//!
//! Everything in the pipeline is a row-major matrix: hidden states are
//! `[tokens x channels]`, projection weights are `[d_in x d_out]`, images are
//! flattened to `[pixels x channels]` before they meet an attention layer.

use thiserror::Error;

/// Additive-mask sentinel for "this query may never attend to this key".
///
/// This is the single place the sentinel is defined. `softmax_rows` maps it to
/// exactly zero probability mass; every mask constructor writes this value and
/// nothing else below zero.
pub const MASK_NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols} ({context})")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
        context: &'static str,
    },
    #[error("row {row} is entirely masked; softmax would divide by zero")]
    FullyMaskedRow { row: usize },
    #[error("empty tensor list for concat")]
    EmptyConcat,
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadDataLength { len: usize, rows: usize, cols: usize },
    #[error("non-finite value produced at ({row}, {col}) ({context})")]
    NonFinite {
        row: usize,
        col: usize,
        context: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense matrix of f64 values. Immutable in normal use: operations
/// return fresh tensors, so sharing across threads is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::BadDataLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
                context: "matmul inner extents",
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.cols {
            return Err(TensorError::ShapeMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
                context: "matmul_nt inner extents",
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rows != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
                context: "matmul_tn inner extents",
            });
        }
        let (m, k, n) = (self.cols, self.rows, rhs.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &rhs.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    fn zip_with(&self, rhs: &Tensor, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::ShapeMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
                context,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "elementwise add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "elementwise sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "elementwise mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-wise softmax. Entries equal to [`MASK_NEG_INF`] get exactly zero
    /// mass; a row with no finite entry is an error.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut max = f64::NEG_INFINITY;
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            if !max.is_finite() {
                return Err(TensorError::FullyMaskedRow { row: r });
            }
            let o_row = &mut out[r * self.cols..(r + 1) * self.cols];
            let mut denom = 0.0;
            for (o, &v) in o_row.iter_mut().zip(row) {
                let e = if v == MASK_NEG_INF { 0.0 } else { (v - max).exp() };
                *o = e;
                denom += e;
            }
            for o in o_row.iter_mut() {
                *o /= denom;
            }
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: out,
        })
    }

    /// Row-wise stacking of `parts` in order. All parts must share a column
    /// extent.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let cols = first.cols;
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    left_rows: first.rows,
                    left_cols: cols,
                    right_rows: p.rows,
                    right_cols: p.cols,
                    context: "concat_rows column extents",
                });
            }
            rows += p.rows;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Rows `[start, start + count)` as a fresh tensor.
    pub fn slice_rows(&self, start: usize, count: usize) -> Tensor {
        assert!(start + count <= self.rows, "row slice out of range");
        Tensor {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// `x * w` for a bias-free linear layer.
    pub fn linear_forward(&self, w: &Tensor) -> Result<Tensor> {
        self.matmul(w)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One N(0, 1) sample via Box-Muller; keeps us off the rand_distr dependency
/// for the single distribution the pipeline needs.
pub fn sample_standard_normal(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Fill a tensor with samples from N(0, scale^2).
pub fn randn(rows: usize, cols: usize, scale: f64, rng: &mut impl rand::Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| sample_standard_normal(rng) * scale)
        .collect();
    Tensor::new(rows, cols, data).expect("length matches by construction")
}
