//! Minimal tensor library with reverse-mode autodiff.
//!
//! Tensors are immutable shared values (cheap to clone); all mutation
//! happens by producing new tensors through [`GradTape`] operations.
//! Training runs in f32; gradient checking re-runs the same generic
//! graph code in f64.

mod gradcheck;
pub mod kernels;
mod param;
mod tape;

pub use gradcheck::{grad_check, gradcheck_suite};
pub use kernels::{mac_count_reset, mac_count_total};
pub use param::{adam_step, AdamConfig, ParamId, ParamStore, Parameter};
pub use tape::{nearest_rows, GradTape, NodeId};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use rand::Rng;

/// Element type of a tensor: f32 for training, f64 for grad checking.
pub trait Scalar: num_traits::Float + fmt::Debug + Send + Sync + 'static {
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// View/convert an f32 tensor as this element type; the f32 case
    /// shares the allocation instead of copying.
    fn tensor_from_f32(t: &Tensor<f32>) -> Tensor<Self>;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn tensor_from_f32(t: &Tensor<f32>) -> Tensor<f32> {
        t.clone()
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn tensor_from_f32(t: &Tensor<f32>) -> Tensor<f64> {
        t.cast()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Dense row-major tensor. `shape.iter().product() == data.len()` always
/// holds; constructors reject anything else.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, ...]", &self.data[..4])
        }
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![E::zero(); n]),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: E) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    /// I.i.d. normal(0, std) entries, consuming the caller's RNG stream.
    pub fn randn<R: Rng>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0f64, std).expect("std must be finite");
        let data = (0..n)
            .map(|_| E::from_f64(rng.sample(dist)))
            .collect::<Vec<_>>();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same data viewed under a different shape (no copy).
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        self.cast()
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        self.cast()
    }
}

/// 2-D index helper for row-major data.
#[inline]
pub fn idx2(cols: usize, r: usize, c: usize) -> usize {
    r * cols + c
}
