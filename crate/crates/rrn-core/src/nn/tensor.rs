//! Flat-buffer tensors and trainable parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RrnError};

/// Dense row-major tensor of `f64` values.
///
/// The engine only ever needs rank 1 (per-feature vectors) and rank 2
/// (`[batch, features]`) shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(RrnError::Shape {
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Batched matrix: `[rows, cols]`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(&[rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor (or 1 for rank-1).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing feature width.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn expect_cols(&self, want: usize) -> Result<()> {
        if self.cols() != want {
            return Err(RrnError::Shape {
                expected: vec![self.rows(), want],
                got: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Concatenates two tensors along the feature axis.
    pub fn hcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rows() != b.rows() {
            return Err(RrnError::Shape {
                expected: vec![a.rows(), b.cols()],
                got: b.shape.clone(),
            });
        }
        let rows = a.rows();
        let (ca, cb) = (a.cols(), b.cols());
        let mut out = Tensor::zeros(&[rows, ca + cb]);
        for r in 0..rows {
            out.row_mut(r)[..ca].copy_from_slice(a.row(r));
            out.row_mut(r)[ca..].copy_from_slice(b.row(r));
        }
        Ok(out)
    }

    /// Splits along the feature axis at `at`, returning `(left, right)`.
    pub fn hsplit(&self, at: usize) -> (Tensor, Tensor) {
        let rows = self.rows();
        let cols = self.cols();
        debug_assert!(at <= cols);
        let mut left = Tensor::zeros(&[rows, at]);
        let mut right = Tensor::zeros(&[rows, cols - at]);
        for r in 0..rows {
            left.row_mut(r).copy_from_slice(&self.row(r)[..at]);
            right.row_mut(r).copy_from_slice(&self.row(r)[at..]);
        }
        (left, right)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }
}

/// A trainable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(&value.shape);
        let v = Tensor::zeros(&value.shape);
        Param {
            value,
            grad: None,
            m,
            v,
        }
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        let shape = self.value.shape.clone();
        self.grad.get_or_insert_with(|| Tensor::zeros(&shape))
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.data.fill(0.0);
        }
    }
}
