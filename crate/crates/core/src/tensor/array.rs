use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable dense row-major array of `f64`.
///
/// Payloads are reference counted, so cloning a tensor is cheap and a tensor
/// can be shared across threads. The last extent is treated as the column
/// count by the matrix-shaped ops.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::shape(format!("shape {shape:?} holds {count} values, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::new(data) })
    }

    /// Builds a tensor without the finiteness scan; callers check afterwards.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_raw(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_raw(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every extent but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("expected a scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    /// Mutable access for in-place parameter updates; copies on write when shared.
    pub(crate) fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Rows `[start, end)` of the matrix view.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows() {
            return Err(Error::shape(format!("row slice {start}..{end} of {} rows", self.rows())));
        }
        let c = self.cols();
        Ok(Self::from_raw(vec![end - start, c], self.data[start * c..end * c].to_vec()))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Self> {
        let cols = parts.first().map(Tensor::cols).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape("concat_rows with differing widths"));
            }
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        Ok(Self::from_raw(vec![rows, cols], data))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.numel() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}
