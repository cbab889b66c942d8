//! Dense double-precision tensors with a tape-based reverse-mode graph.
//!
//! Everything is row-major `f64`. Batched operators take the batch as the
//! leading axis; the convolution entry points also accept unbatched input
//! and hand back unbatched output.

mod blob;
mod conv;
mod graph;
mod ops;
mod pool;

pub use blob::{read_blob, write_blob, BLOB_MAGIC};
pub use conv::{Conv1dGeom, Conv3dGeom};
pub use graph::{Graph, Mode, RunningStatUpdate, Var};
pub use ops::NormAxes;

use crate::error::{invalid, Result};

/// Padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// No padding; output length `floor((n - f) / s) + 1`.
    Valid,
    /// Zero padding so the output length is `ceil(n / s)`; the odd extra
    /// element goes after the data.
    Same,
}

/// A dense array plus its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl DiffTensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n = numel(shape);
        if values.len() != n {
            return Err(invalid(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![0.0; numel(shape)])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("scalar shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Returns a copy with a new shape holding the same number of values.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.len() {
            return Err(invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        Ok(out)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        let n = values.len();
        Self {
            shape,
            values,
            grad: vec![0.0; n],
            requires_grad,
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(invalid(format!(
            "shape {:?} must be non-empty with positive dimensions",
            shape
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_matches_value_shape() {
        let t = DiffTensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.grad().len(), t.values().len());
        assert!(t.grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DiffTensor::new(&[2, 0], vec![]).is_err());
        assert!(DiffTensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(DiffTensor::zeros(&[]).is_err());
    }

    #[test]
    fn reshape_keeps_values() {
        let t = DiffTensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.values(), t.values());
        assert!(t.reshaped(&[4, 2]).is_err());
    }
}
