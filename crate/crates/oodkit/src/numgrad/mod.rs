//! Dense f64 arrays with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive ops during a forward pass (define-by-run) and
//! replays them in reverse to produce exact gradients of a scalar with respect
//! to any watched tensor, parameters and inputs alike. Every primitive checks
//! its result for NaN/Inf and fails fast naming the offending op.

mod tape;

pub use tape::{NodeId, Tape};
pub(crate) use tape::transpose_raw;

use std::fmt;

/// Errors raised by tensor construction and primitive ops.
#[derive(Debug, Clone, PartialEq)]
pub enum NumError {
    /// Operand shapes are incompatible with the op.
    Shape { op: &'static str, detail: String },
    /// An op produced a NaN or Inf.
    NonFinite { op: &'static str },
    /// `grad` was called on a tensor with more than one element.
    NotScalar { len: usize },
    /// `grad` was called on a tensor that is not attached to this tape.
    NotOnTape,
    /// A reduction or row-wise op was applied along an empty axis.
    EmptyAxis { op: &'static str },
    /// A value violated an op's domain contract (e.g. a non-positive divisor).
    Domain { op: &'static str, detail: String },
}

impl fmt::Display for NumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumError::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            NumError::NonFinite { op } => write!(f, "{op}: non-finite result"),
            NumError::NotScalar { len } => {
                write!(f, "grad: expected scalar output, got {len} elements")
            }
            NumError::NotOnTape => write!(f, "grad: output tensor is not on the active tape"),
            NumError::EmptyAxis { op } => write!(f, "{op}: empty axis"),
            NumError::Domain { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for NumError {}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<(), NumError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite { op })
    }
}

/// A dense row-major f64 array, optionally attached to a gradient tape.
///
/// Tensors are plain values: cloning copies the data. A tensor carries a
/// `node` handle only when it was produced by (or watched on) a tape; ops on
/// detached tensors compute forward values without recording anything.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<NodeId>,
}

impl PartialEq for Tensor {
    /// Value equality: shape and data only, ignoring tape attachment.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    /// Builds a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, NumError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::Shape {
                op: "new",
                detail: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        check_finite("new", &data)?;
        Ok(Tensor { shape, data, requires_grad: false, node: None })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).expect("scalar is always valid for finite v")
    }

    pub fn vector(data: Vec<f64>) -> Result<Tensor, NumError> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor, NumError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, node: None }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Result<Tensor, NumError> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![v; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Number of rows; the tensor must be 2-D.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix shape {:?}", self.shape);
        self.shape[0]
    }

    /// Number of columns; the tensor must be 2-D.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix shape {:?}", self.shape);
        self.shape[1]
    }

    /// Element (r, c) of a 2-D tensor.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Copy of row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> Vec<f64> {
        let c = self.cols();
        self.data[r * c..(r + 1) * c].to_vec()
    }

    /// A copy detached from any tape.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            node: None,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeId>) -> Tensor {
        Tensor { shape, data, requires_grad: node.is_some(), node }
    }
}
