//! Dense batch tensor shared by the network layers.

use std::fmt;

/// Batched numeric array, either `(batch, channels, height, width)` or
/// `(batch, features)`, stored row-major in a flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBatch {
    data: Vec<f64>,
    shape: Vec<usize>,
}

/// Shape violation raised by tensor construction and layer application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMismatch {
    pub expected: String,
    pub got: String,
}

impl fmt::Display for ShapeMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "shape mismatch: expected {}, got {}", self.expected, self.got)
    }
}

impl std::error::Error for ShapeMismatch {}

impl TensorBatch {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ShapeMismatch> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || !(shape.len() == 2 || shape.len() == 4) {
            return Err(ShapeMismatch {
                expected: format!("{shape:?} ({expect} elements, rank 2 or 4)"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { data: vec![0.0; n], shape }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed samples into a new batch, preserving order.
    pub fn gather(&self, indices: &[usize]) -> TensorBatch {
        let len = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self { data, shape }
    }
}
