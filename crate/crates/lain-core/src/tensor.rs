//! Dense row-major f64 tensor plus a few pure numeric routines.
//!
//! Rank 0 (scalar), rank 1 (vector) and rank 2 (matrix) cover every shape the
//! model needs. The gradient slot is populated by the autodiff graph for
//! trainable parameters and never serialized.

use serde::{Deserialize, Serialize};

use crate::error::{LainError, Result};

/// Logits of masked softmax positions are pinned to this value before
/// normalization; outputs at those positions are forced to exact zero.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(LainError::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LainError::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn as_scalar(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [r, _] => *r,
            _ => panic!("rows() on tensor of shape {:?}", self.shape),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.as_slice() {
            [_, c] => *c,
            _ => panic!("cols() on tensor of shape {:?}", self.shape),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Accumulating grad slot, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn clear_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus, for initializing raw parameters to a target
/// effective value: softplus(softplus_inv(y)) == y for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

/// Temperature softmax over a logit vector with optional validity mask.
///
/// Masked positions are pinned to [`MASKED_LOGIT`] before normalization and
/// forced to exact zero on output. The unmasked outputs are positive and sum
/// to 1. Errors: `tau <= 0` is a domain error, a fully masked input is a
/// degenerate mask.
pub fn softmax_temp(logits: &[f64], tau: f64, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(LainError::domain("softmax_temp", format!("tau must be positive, got {tau}")));
    }
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(LainError::shape(
                "softmax_temp",
                format!("mask length {} vs logits length {}", m.len(), logits.len()),
            ));
        }
    }
    let valid = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for i in 0..logits.len() {
        if valid(i) {
            max = max.max(logits[i] / tau);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(LainError::DegenerateMask);
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        let z = if valid(i) { logits[i] / tau } else { MASKED_LOGIT };
        let e = (z - max).exp();
        out[i] = e;
        sum += e;
    }
    for (i, o) in out.iter_mut().enumerate() {
        if valid(i) {
            *o /= sum;
        } else {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// Binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(LainError::shape(
            "bce_loss",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut total = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(total / predictions.len() as f64)
}
