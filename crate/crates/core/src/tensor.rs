//! Dense 2-d f32 tensors and the forward/backward kernels built on them.
//!
//! Storage is 32-bit, row-major. Every reduction (matmul inner loops, norms,
//! losses) accumulates in f64 before rounding back, which keeps results stable
//! across summation orders at these sizes. There is no autograd graph; each
//! forward op has a matching hand-written backward that callers assemble into
//! a static tape.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("label {label} at row {index} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite gradient in {what}")]
    NonFiniteGradient { what: &'static str },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
}

/// Dense row-major matrix of f32.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut t = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                t.data[r * cols + c] = f(r, c);
            }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut t = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self @ other` with f64 accumulation.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, m);
        let mut acc = vec![0.0f64; m];
        for i in 0..n {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let lhs_row = &self.data[i * k..(i + 1) * k];
            for (t, &l) in lhs_row.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let l = l as f64;
                let rhs_row = &other.data[t * m..(t + 1) * m];
                for (a, &r) in acc.iter_mut().zip(rhs_row) {
                    *a += l * r as f64;
                }
            }
            for (o, &a) in out.data[i * m..(i + 1) * m].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
        Ok(out)
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_scaled",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Column sums with f64 accumulation; the backward of a broadcast row bias.
    pub fn column_sums(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (a, &v) in acc.iter_mut().zip(self.row(r)) {
                *a += v as f64;
            }
        }
        acc.into_iter().map(|a| a as f32).collect()
    }

    /// Column means with f64 accumulation. Errors on zero rows.
    pub fn mean_rows(&self) -> Result<Vec<f32>, NumericsError> {
        if self.rows == 0 {
            return Err(NumericsError::EmptyInput { op: "mean_rows" });
        }
        let n = self.rows as f64;
        Ok(self
            .column_sums()
            .into_iter()
            .map(|s| (s as f64 / n) as f32)
            .collect())
    }
}

/// `x @ w (+ bias)`, bias broadcast across rows.
pub fn linear_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
) -> Result<Tensor, NumericsError> {
    let mut out = x.matmul(w)?;
    if let Some(b) = bias {
        if b.len() != w.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "linear_forward",
                lhs: (b.len(), 1),
                rhs: (w.cols(), 1),
            });
        }
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

pub struct LinearGrads {
    pub d_x: Tensor,
    pub d_w: Tensor,
    pub d_bias: Option<Vec<f32>>,
}

/// Exact gradients of [`linear_forward`]: `d_x = d_out @ w^T`,
/// `d_w = x^T @ d_out`, `d_bias = column sums of d_out`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    d_out: &Tensor,
    with_bias: bool,
) -> Result<LinearGrads, NumericsError> {
    if d_out.shape() != (x.rows(), w.cols()) {
        return Err(NumericsError::ShapeMismatch {
            op: "linear_backward",
            lhs: d_out.shape(),
            rhs: (x.rows(), w.cols()),
        });
    }
    Ok(LinearGrads {
        d_x: d_out.matmul(&w.transpose())?,
        d_w: x.transpose().matmul(d_out)?,
        d_bias: with_bias.then(|| d_out.column_sums()),
    })
}

/// Row-wise softmax via the shifted, log-sum-exp-stable form.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut denom = 0.0f64;
        for &v in row {
            denom += libm::exp(v as f64 - max);
        }
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (libm::exp(v as f64 - max) / denom) as f32;
        }
    }
    out
}

/// Mean negative log-likelihood over rows plus its gradient
/// `(softmax - onehot) / n`. Numerically stable for large-magnitude logits.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor), NumericsError> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(NumericsError::EmptyInput {
            op: "softmax_cross_entropy",
        });
    }
    if labels.len() != logits.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape(),
            rhs: (labels.len(), 1),
        });
    }
    let classes = logits.cols();
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NumericsError::LabelOutOfRange {
                index,
                label,
                classes,
            });
        }
    }
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut grad = Tensor::zeros(n, classes);
    let mut loss = 0.0f64;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut denom = 0.0f64;
        for &v in row {
            denom += libm::exp(v as f64 - max);
        }
        let lse = max + libm::log(denom);
        loss += (lse - row[labels[r]] as f64) * inv_n;
        for (c, (g, &v)) in grad.row_mut(r).iter_mut().zip(row).enumerate() {
            let p = libm::exp(v as f64 - lse);
            let delta = if c == labels[r] { 1.0 } else { 0.0 };
            *g = ((p - delta) * inv_n) as f32;
        }
    }
    Ok((loss, grad))
}

pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn l2_norm(u: &[f32]) -> f64 {
    libm::sqrt(dot(u, u))
}

/// Cosine similarity with the zero-vector convention: either norm zero gives
/// exactly 0.0.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f32, NumericsError> {
    if u.len() != v.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: (u.len(), 1),
            rhs: (v.len(), 1),
        });
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)) as f32)
}

/// Unit-normalizes a vector; the zero vector is returned unchanged.
pub fn l2_normalize(u: &[f32]) -> Vec<f32> {
    let n = l2_norm(u);
    if n == 0.0 {
        return u.to_vec();
    }
    u.iter().map(|&x| (x as f64 / n) as f32).collect()
}
