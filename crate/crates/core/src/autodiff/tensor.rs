use std::sync::Arc;

use crate::real::Real;

/// Dense row-major n-d array. Cloning is cheap (shared storage); mutation
/// goes through [`Tensor::make_mut`], which copies only when aliased.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data: Arc::new(data) }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![T::zero(); n]) }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![v; n]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Row count for rank-2 tensors, length for rank-1, 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count for rank-2 tensors, 1 otherwise.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn make_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data)
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor with {} values", self.numel());
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, used by verification paths that recompute a
    /// 32-bit model at 64-bit precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect()),
        }
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a == b)
    }
}
