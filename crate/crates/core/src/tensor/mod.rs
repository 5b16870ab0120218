//! Dense row-major `f64` tensors and the reverse-mode tape that differentiates them.
//!
//! Values are plain [`Tensor`]s. Computation that needs gradients is recorded on a
//! [`Tape`]: leaves are registered with [`Tape::leaf`], every op appends a node, and
//! [`Tape::backward`] replays the nodes in reverse to produce [`Gradients`]. Model
//! parameters keep their own gradient accumulator (see [`Tensor::set_requires_grad`]),
//! which the caller fills from the returned gradients.

mod ops;
mod optim;
mod tape;

pub use ops::{Activation, Padding, ReduceKind};
pub use optim::{Adam, AdamState, Optimizer, Sgd};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that the data
    /// length matches the shape. A rank-0 shape holds exactly one value.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("full: extents must be positive")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Tensor::new(shape.to_vec(), data).expect("from_fn: extents must be positive")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(format!(
                "item() needs a single-element tensor, shape is {:?}",
                self.shape
            )))
        }
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            debug_assert!(i < e);
            acc * e + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::new(shape.to_vec(), self.data.clone())?;
        t.grad = self.grad.clone();
        Ok(t)
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Turning gradients on allocates a zeroed accumulator; turning them off drops it.
    pub fn set_requires_grad(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `g` into the accumulator. A tensor without gradients ignores the call.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        let Some(acc) = self.grad.as_mut() else {
            return Ok(());
        };
        if acc.len() != g.len() {
            return Err(Error::invalid(format!(
                "gradient length {} does not match tensor length {}",
                g.len(),
                acc.len()
            )));
        }
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Value and gradient bodies, for optimizers.
    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 3.5);
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.get(&[1, 2, 3]), 23.0);
        assert_eq!(t.get(&[0, 1, 0]), 4.0);
    }

    #[test]
    fn grad_accumulator_follows_flag() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
