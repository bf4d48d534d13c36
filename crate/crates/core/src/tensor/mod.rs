//! A small reverse-mode automatic differentiation engine.
//!
//! [`Tensor`] is a plain row-major array. Computation happens on a [`Graph`],
//! a tape of operations whose nodes are addressed by [`Var`] handles; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.
//! A leaf used several times (a shared layer applied at every depth) simply
//! receives the sum of the contributions from every use.

mod graph;
pub mod checkpoint;
pub mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

pub use graph::{Graph, Var};
pub use optim::Adam;

/// Floating point element type: `f64` for gradient checks and determinism
/// tests, `f32` for training speed.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: &'static str;
    /// Additive logit surrogate for masked-out attention positions.
    const MASK_FILL: Self;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTES: usize;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const MASK_FILL: Self = -1e9;
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const MASK_FILL: Self = -1e9;
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("index {index} out of range for {op} with bound {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
}

pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

/// Row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn scalar(x: T) -> Self {
        Self { shape: Vec::new(), data: vec![x] }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}

/// A named tensor in a model's parameter collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// An ordered, named collection of parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Parameter { name: name.into(), tensor, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count. Each parameter is counted once no matter how
    /// many times the model applies it.
    pub fn count_params(&self, trainable_only: bool) -> usize {
        count_params(&self.params, trainable_only)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), tensor: p.tensor.cast(), trainable: p.trainable })
                .collect(),
        }
    }
}

pub fn count_params<T: Real>(params: &[Parameter<T>], trainable_only: bool) -> usize {
    params.iter().filter(|p| p.trainable || !trainable_only).map(|p| p.tensor.len()).sum()
}

impl<T> From<Vec<Parameter<T>>> for ParamSet<T> {
    fn from(params: Vec<Parameter<T>>) -> Self {
        Self { params }
    }
}
