//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! Feature maps use the layout `(channels, d0, d1, d2)` with the last axis
//! contiguous. Convolution weights are `(c_out, c_in, k, k, k)`.

mod adam;
mod graph;
pub mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

pub use adam::{AdamHyper, AdamState};
pub use graph::{Gradients, Graph, Var};

/// Element type of the engine. `f32` is the working precision and `f64` is
/// used for gradient checking.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + 'static
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

/// Conv padding mode: `Valid` shrinks each spatial extent by `k - 1`,
/// `Same` zero-pads by `(k - 1) / 2` per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Spatial extents of a `(C, d0, d1, d2)` feature map.
    pub fn spatial(&self) -> Result<[usize; 3]> {
        match self.shape[..] {
            [_, a, b, c] => Ok([a, b, c]),
            _ => Err(Error::Shape(format!("expected (C, d0, d1, d2), got {:?}", self.shape))),
        }
    }

    pub fn channels(&self) -> Result<usize> {
        match self.shape[..] {
            [c, _, _, _] => Ok(c),
            _ => Err(Error::Shape(format!("expected (C, d0, d1, d2), got {:?}", self.shape))),
        }
    }

    /// Precision conversion, e.g. `f32 -> f64` for gradient checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
