//! Dense row-major `f64` tensors.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dims {dims:?} describe {expected} elements but {actual} were given")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero extent in dims {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
}

/// A dense tensor with positive extents and finite entries.
///
/// A scalar is a tensor with `dims == [1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// Validating constructor: checks extents, length and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::ZeroExtent(dims));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { dims, data })
    }

    /// Constructor for values produced by internal computation.
    ///
    /// Only the length is checked; finiteness is the caller's job (the graph
    /// and optimizer check it where it matters).
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Rows of a tensor viewed as 2-D (leading dims flattened).
    pub fn rows(&self) -> usize {
        if self.dims.len() == 1 {
            1
        } else {
            self.data.len() / self.cols()
        }
    }

    /// Last extent.
    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Self, TensorError> {
        Self::new(dims.to_vec(), self.data.clone())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| if v.abs() > m { v.abs() } else { m })
    }

    /// Elementwise `self += other * scale`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}
