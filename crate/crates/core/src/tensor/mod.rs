//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: shape plus a shared buffer. Tensors
//! become differentiable by being registered on a [`Tape`], which records
//! every operation applied to registered tensors and can replay them in
//! reverse to produce gradients ([`Tape::backward`]). Finite-difference
//! verification of those gradients lives in [`grad_check`].

mod backward;
mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{
    grad_check, grad_check_sampled, op_checks, run_op_check, run_op_check_skewed, CheckCase, OpCheck,
    ScalarFn, DEFAULT_GRAD_EPS,
};
pub use tape::{BinaryKind, BnMoments, BnStats, GradStore, ReduceKind, Tape, UnaryKind};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Identifier tying a tensor to a node on one specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub id: usize,
}

/// Dense row-major tensor. Cloning is cheap (the buffer is shared).
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    pub(crate) node: Option<NodeRef>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a flat row-major buffer. The buffer length must
    /// equal the product of the extents.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} implies {} elements, buffer has {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![T::ZERO; numel]), node: None }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), node: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), node: None }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape, data: Arc::new(data), node: None }
    }

    /// Standard normal draws scaled by `std`. Values are drawn in f64 and
    /// narrowed, so the draw sequence is identical across precisions.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64(v * std)
            })
            .collect();
        Tensor { shape, data: Arc::new(data), node: None }
    }

    /// Uniform draws from [lo, hi), drawn in f64 and narrowed.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let dist = Uniform::new(lo, hi);
        let data = (0..numel).map(|_| T::from_f64(dist.sample(rng))).collect();
        Tensor { shape, data: Arc::new(data), node: None }
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

    pub(crate) fn buffer(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("tensor has shape {:?}, expected one element", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Same values, no tape association. Gradients do not flow through.
    pub fn detached(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// Elementwise map producing a detached tensor. Not recorded on any
    /// tape; intended for data preparation, not differentiable compute.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), node: None }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of a multi-index.
    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape("flat_index", format!("index rank {} vs shape {:?}", index.len(), self.shape)));
        }
        let mut flat = 0;
        for (d, (&i, &ext)) in index.iter().zip(&self.shape).enumerate() {
            if i >= ext {
                return Err(Error::shape("flat_index", format!("index {} out of range at axis {} (extent {})", i, d, ext)));
            }
            flat = flat * ext + i;
        }
        Ok(flat)
    }

    pub fn at(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.flat_index(index)?])
    }

    /// Widens to f64, regardless of the run precision.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}
