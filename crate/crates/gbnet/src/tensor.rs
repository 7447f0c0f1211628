//! Dense rank-≤2 tensors in 64-bit floats.
//!
//! This is the value type shared by the whole crate: model parameters,
//! node states, bridge matrices and detector distributions are all
//! `Tensor`s. Vectors are column vectors (`cols == 1`). A tensor may
//! carry an accumulated gradient of the same shape in its `grad` slot;
//! gradients are produced by [`crate::tape::Tape::backward`] and written
//! back by the trainer.

use crate::error::{GbError, Result};

#[derive(Debug, Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        // Gradient slots are scratch state, not part of the value.
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols], grad: None }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GbError::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor { rows, cols, data, grad: None })
    }

    /// Column vector from a slice.
    pub fn vector(data: &[f64]) -> Self {
        Tensor { rows: data.len(), cols: 1, data: data.to_vec(), grad: None }
    }

    /// 1x1 tensor.
    pub fn scalar(x: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![x], grad: None }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Matrix-vector product `self * x`.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_vector() || x.rows != self.cols {
            return Err(GbError::Shape(format!(
                "matvec: {}x{} * {}x{}",
                self.rows, self.cols, x.rows, x.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.data.iter()) {
                acc += a * b;
            }
            *o = acc;
        }
        Ok(Tensor { rows: self.rows, cols: 1, data: out, grad: None })
    }
}

/// Numerically stable softmax of a vector of logits (max-subtraction).
pub fn row_softmax_stable(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_vector() || logits.is_empty() {
        return Err(GbError::Shape(format!(
            "row_softmax_stable expects a non-empty vector, got {}x{}",
            logits.rows, logits.cols
        )));
    }
    let data = softmax_slice(logits.as_slice());
    Ok(Tensor { rows: logits.rows, cols: 1, data, grad: None })
}

/// Softmax on a raw slice; shared with the tape op.
pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// A two-layer head: `w2 * relu(w1 * x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpHead {
    pub fn in_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.rows()
    }
}

/// Evaluate a single-hidden-layer ReLU head.
pub fn evaluate_mlp_head(head: &MlpHead, x: &Tensor) -> Result<Tensor> {
    if head.b1.rows() != head.w1.rows() || head.w2.cols() != head.w1.rows()
        || head.b2.rows() != head.w2.rows()
    {
        return Err(GbError::Shape("mlp head has inconsistent layer shapes".into()));
    }
    let mut h = head.w1.matvec(x)?;
    for (v, b) in h.as_mut_slice().iter_mut().zip(head.b1.as_slice()) {
        *v = (*v + b).max(0.0);
    }
    let mut out = head.w2.matvec(&h)?;
    for (v, b) in out.as_mut_slice().iter_mut().zip(head.b2.as_slice()) {
        *v += b;
    }
    Ok(out)
}
