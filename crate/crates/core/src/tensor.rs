//! Dense row-major tensors.
//!
//! The laboratory only ever needs vectors and matrices, so `Tensor` is a
//! deliberately small container: a shape plus a flat value buffer, with
//! just enough structure for the graph ops and serializers built on top.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Creates a tensor, checking that the buffer length matches the shape.
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {:?} implies {} elements but {} were provided",
                    shape,
                    expected,
                    values.len()
                ),
            ));
        }
        Ok(Tensor { shape, values })
    }

    /// One-dimensional tensor from a value buffer.
    pub fn vector(values: Vec<S>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    /// Two-dimensional tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, values: Vec<S>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    /// A scalar (rank-0) tensor.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            values: vec![value],
        }
    }

    /// Tensor of zeros with the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![S::zero(); len],
        }
    }

    /// The tensor's shape. Rank 0 (empty shape) is a scalar.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Flat row-major view of the values.
    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// Mutable flat view of the values.
    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    /// Consumes the tensor, returning its value buffer.
    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.values.len() == 1 {
            Ok(self.values[0])
        } else {
            Err(Error::shape(
                "Tensor::item",
                format!(
                    "expected a single element, tensor has {}",
                    self.values.len()
                ),
            ))
        }
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
