//! Dense 64-bit float tensors (0-d scalars, vectors, row-major matrices).
//!
//! A `Tensor` is a cheap-to-clone value: the payload sits behind an `Arc` and
//! is never mutated in place. A tensor may carry a handle into the [`Tape`]
//! that produced it; detached tensors (no handle) are plain immutable data and
//! safe to share across threads.
//!
//! [`Tape`]: super::Tape

use std::sync::Arc;

use crate::error::{Error, Result};

/// Handle tying a tensor to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub idx: usize,
}

/// Immutable f64 tensor with optional tape handle.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// 0-d scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]), node: None }
    }

    /// 1-d vector.
    pub fn vector(v: &[f64]) -> Self {
        Tensor { shape: vec![v.len()], data: Arc::new(v.to_vec()), node: None }
    }

    /// Row-major `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "matrix",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor { shape: vec![rows, cols], data: Arc::new(data), node: None })
    }

    /// Arbitrary shape from a flat row-major buffer.
    pub fn from_shape(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "from_shape",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; numel]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Rows of a matrix; a vector counts as a single row, a scalar as 1x1.
    pub fn nrows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns of a matrix, or the length of a vector.
    pub fn ncols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    /// Extract the single element of a scalar (or 1-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                op: "item",
                detail: format!("expected 1 element, shape is {:?}", self.shape),
            })
        }
    }

    /// Same values with the tape handle removed: constants do not receive
    /// gradients, so this is the stop-gradient primitive.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub(crate) fn with_node(&self, node: NodeRef) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: Some(node) }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
