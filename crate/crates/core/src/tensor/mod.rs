//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tensor`] is a row-major value array plus an optional gradient. Math is
//! recorded on a [`Tape`]: every operation pushes its inputs, output and
//! backward rule, and [`Tape::backward`] replays the records in reverse,
//! accumulating gradients by the chain rule. One tape owns one computation;
//! independent tapes may run on different threads.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{EwiseKind, Mode, Tape, TensorId};

use crate::{CoreError, Result};

/// Dense n-dimensional value array with an attached gradient slot.
///
/// `values` is row-major. `grad` is allocated lazily by the backward pass.
/// `node_id` is set once the tensor lives on a tape; constants keep `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    node_id: Option<usize>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(CoreError::BadShape {
                op: "Tensor::new",
                shape: shape.to_vec(),
                msg: format!("shape wants {numel} values, got {}", values.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
            node_id: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            grad: None,
            requires_grad: false,
            node_id: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(&[1], vec![v]).expect("scalar shape")
    }

    /// Trainable tensor: participates in gradient accumulation.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, values)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node_id
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Last-dimension extent; 1 for scalars.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Value at a rank-2 index.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[row * self.shape[1] + col]
    }

    pub(crate) fn set_node_id(&mut self, id: usize) {
        self.node_id = Some(id);
    }

    pub(crate) fn grad_mut_or_zeros(&mut self) -> &mut Vec<f64> {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }
}
