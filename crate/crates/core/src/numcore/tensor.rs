use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating-point element type of tensors: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + std::ops::AddAssign + std::ops::SubAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero extent")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {} values but {} were given",
                numel(&shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at flat index {i}")));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Zero-mean gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Converts element precision, dropping any gradient.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }
}
