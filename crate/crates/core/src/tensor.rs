use thiserror::Error;

use crate::rearrange::TokenGrid;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("shape {shape:?} needs {expected} elements, got {got}")]
pub struct ShapeError {
    pub shape: Vec<usize>,
    pub expected: usize,
    pub got: usize,
}

/// Owned row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ShapeError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(ShapeError {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view: last dimension is columns, everything before it
    /// is flattened into rows. A rank-0 or rank-1 tensor is a single row.
    pub fn as_matrix(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&cols, lead)) => (lead.iter().product(), cols),
        }
    }
}

impl From<TokenGrid> for Tensor {
    fn from(grid: TokenGrid) -> Self {
        let (f, t, d) = grid.shape();
        Tensor {
            shape: vec![f, t, d],
            data: grid.into_data(),
        }
    }
}
