//! Dense n-dimensional row-major tensors.
//!
//! A [`Tensor`] is a plain value: shape metadata plus a flat buffer. All
//! gradient machinery lives on the [`crate::tape::Tape`]; the only autodiff
//! state carried here is the `requires_grad` flag consulted when a tensor is
//! registered as a tape leaf.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("shape {} does not hold {} values", fmt_shape(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor { shape, data: vec![S::zero(); n], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = numel_of(&shape);
        Tensor { shape, data: vec![v; n], requires_grad: false }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Metadata-only reshape; the buffer is always contiguous row-major.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {} as {}", fmt_shape(&self.shape), fmt_shape(&shape)),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    /// Elementwise `self + c * other`; shapes must match exactly.
    pub fn axpy(&self, c: S, other: &Tensor<S>) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "axpy",
                format!("{} vs {}", fmt_shape(&self.shape), fmt_shape(&other.shape)),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + c * b)
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data, requires_grad: false })
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |acc, d| if d > acc { d } else { acc })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape_product() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x3]") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn scalar_is_rank_zero() {
        let t = Tensor::scalar(3.5f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.numel(), 1);
    }

    #[test]
    fn reshape_is_metadata_only() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ptr = t.data().as_ptr();
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.data().as_ptr(), ptr);
        assert_eq!(r.shape(), &[3, 2]);
    }
}
