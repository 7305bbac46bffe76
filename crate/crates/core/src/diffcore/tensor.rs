//! Dense row-major f64 tensor values.
//!
//! Tensors here are plain values: rank 0 (scalar, shape `[]`), rank 1, or
//! rank 2. Differentiable structure lives in [`crate::diffcore::Graph`]; a
//! tensor by itself is immutable data that is safe to share across threads.

use serde::{Deserialize, Serialize};

use super::DiffError;

/// Dense row-major f64 tensor of rank 0, 1, or 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` accounts for every element.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiffError::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        if shape.len() > 2 {
            return Err(DiffError::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: "rank > 2 unsupported".to_string(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    /// Rank-1 tensor from a value slice.
    pub fn vector(data: &[f64]) -> Self {
        Self {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    /// Rank-2 tensor from rows×cols and a row-major value slice.
    pub fn matrix(rows: usize, cols: usize, data: &[f64]) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], data.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The sole value of a one-element tensor.
    pub fn item(&self) -> Result<f64, DiffError> {
        if self.data.len() != 1 {
            return Err(DiffError::ContractViolation(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows of the tensor viewed as a matrix: rank 2 → shape[0], rank 1 → 1.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => 1,
        }
    }

    /// Columns of the tensor viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    /// Element at (row, col) of the matrix view.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
