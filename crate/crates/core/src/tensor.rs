//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a contiguous buffer. Gradient
//! state lives on the [`Tape`](crate::autodiff::Tape) node that wraps it.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

/// Initialization scheme for [`Tensor::create`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[0, 1)`.
    Uniform { seed: u64 },
    /// Zero-mean normal with the given standard deviation.
    Gaussian { seed: u64, std: f64 },
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Tensor<S: Real = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> core::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must have at least one dimension",
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero-size dimension",
        });
    }
    Ok(())
}

impl<S: Real> Tensor<S> {
    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        check_shape(shape)?;
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Ones => vec![S::one(); n],
            Init::Uniform { seed } => {
                let mut rng = Rng::seed_from_u64(seed);
                (0..n).map(|_| S::from_f64(rng.uniform_f32() as f64)).collect()
            }
            Init::Gaussian { seed, std } => {
                let mut rng = Rng::seed_from_u64(seed);
                (0..n).map(|_| S::from_f64(rng.gaussian() * std)).collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "element count does not match buffer length",
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-0 tensor.
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// Internal constructor for op outputs, which may be rank 0.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Ones)
    }

    pub fn full(shape: &[usize], v: S) -> Result<Self> {
        check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        })
    }

    pub fn uniform(shape: &[usize], seed: u64) -> Result<Self> {
        Self::create(shape, Init::Uniform { seed })
    }

    pub fn gaussian(shape: &[usize], seed: u64, std: f64) -> Result<Self> {
        Self::create(shape, Init::Gaussian { seed, std })
    }

    /// Gaussian draws from an existing stream.
    pub fn gaussian_from(shape: &[usize], rng: &mut Rng, std: f64) -> Result<Self> {
        check_shape(shape)?;
        let data = (0..numel(shape))
            .map(|_| S::from_f64(rng.gaussian() * std))
            .collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![S::zero(); self.data.len()],
        }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: S) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        num_traits::Float::sqrt(self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }
}

impl Tensor<f32> {
    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor<f32>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
