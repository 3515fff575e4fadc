//! Dense row-major N-D arrays.
//!
//! A [`Tensor`] is a plain value: shape plus flat buffer. Gradient tracking
//! lives in [`crate::autodiff::Graph`], which owns tensors as node values.
//! Images and feature maps use the layout `[C, spatial...]`; sampling grids
//! use `[N, spatial...]` with channel `i` holding the coordinate along
//! spatial axis `i`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Decompose a flat row-major index into a multi-index (written into `out`).
pub fn unravel(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for i in (0..shape.len()).rev() {
        out[i] = flat % shape[i];
        flat /= shape[i];
    }
}

pub fn ravel(index: &[usize], shape: &[usize]) -> usize {
    index
        .iter()
        .zip(shape)
        .fold(0, |acc, (&i, &d)| acc * d + i)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract("Tensor::new", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Build a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let mut idx = vec![0; shape.len()];
        let mut data = Vec::with_capacity(numel);
        for flat in 0..numel {
            unravel(flat, shape, &mut idx);
            data.push(f(&idx));
        }
        Self { shape: shape.to_vec(), data }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading (channel) extent of a `[C, spatial...]` tensor.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extents of a `[C, spatial...]` tensor.
    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[ravel(index, &self.shape)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let flat = ravel(index, &self.shape);
        self.data[flat] = value;
    }

    /// The only element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Slice `[c, ...]` of a `[C, spatial...]` tensor as a `[1, spatial...]` tensor.
    pub fn channel(&self, c: usize) -> Self {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self { shape, data: self.data[c * per..(c + 1) * per].to_vec() }
    }

    pub fn channel_slice(&self, c: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[c * per..(c + 1) * per]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reverse the order of elements along `axis`.
    pub fn flip(&self, axis: usize) -> Self {
        let strides = strides_of(&self.shape);
        let d = self.shape[axis];
        let s = strides[axis];
        let mut out = self.data.clone();
        for (flat, v) in out.iter_mut().enumerate() {
            let i = (flat / s) % d;
            let src = flat - i * s + (d - 1 - i) * s;
            *v = self.data[src];
        }
        Self { shape: self.shape.clone(), data: out }
    }

    /// Element-type conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn ravel_unravel_agree() {
        let shape = [3, 4, 5];
        let mut idx = [0; 3];
        for flat in 0..60 {
            unravel(flat, &shape, &mut idx);
            assert_eq!(ravel(&idx, &shape), flat);
        }
        assert_eq!(strides_of(&shape), vec![20, 5, 1]);
    }

    #[test]
    fn flip_is_involution() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f32);
        let f = t.flip(2);
        assert_eq!(f.get(&[1, 2, 0]), 123.0);
        assert_eq!(f.flip(2), t);
        assert_eq!(t.flip(1).flip(1), t);
    }
}
