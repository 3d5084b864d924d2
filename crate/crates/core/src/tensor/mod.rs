//! Dense row-major f64 tensors, trainable parameters, and a define-by-run
//! reverse-mode tape. The graph is rebuilt on every forward pass; `Tape`
//! records each operation as it executes and replays adjoints in reverse.

mod check;
mod tape;

pub use check::gradient_check;
pub use tape::{BackwardStats, Tape, TensorId, UnaryKind};

use crate::{Error, Result};

/// Dense row-major tensor. The shape product always equals the buffer length
/// and every dimension is at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "dimensions must all be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} values, buffer has {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![v; numel],
        }
    }

    /// Single-element tensor of shape [1].
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element by multi-index (row-major). Test and report helper.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} ({dim})");
            flat = flat * dim + ix;
        }
        self.values[flat]
    }
}

/// Row-wise argmax over the last axis, ties broken toward the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape.last().expect("non-empty shape");
    t.values
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// A named trainable tensor with its gradient accumulator and first/second
/// Adam moment slots. Gradient and slots always share the value's shape and
/// the slots start at zero.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let z = Tensor::zeros(&value.shape);
        Self {
            name: name.into(),
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.values.fill(0.0);
    }
}
