//! Dense f32 tensors, forward kernels and a small define-by-run autodiff tape.
//!
//! Activations use NCHW order. All reductions run in a fixed order so that
//! identical inputs give bit-identical outputs.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod kernels;

pub use gemm::gemm;
pub use gradcheck::{grad_check, GradCheckOp};
pub use graph::{Graph, OpKind, Var};

use crate::error::{Error, Result};

/// Scalar type the forward kernels are generic over. Training runs in `f32`;
/// gradient checking re-evaluates the same kernels in `f64`.
pub trait Real: num_traits::Float + std::ops::AddAssign + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Row-major n-dimensional array of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::dim("tensor", "rank", "at least 1", 0));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("axis {i}"), "≥ 1", 0));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::dim("tensor", "data length", len, data.len()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0), "bad dims {dims:?}");
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
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

    /// Interprets the tensor as NCHW.
    pub fn nchw(&self) -> Result<[usize; 4]> {
        match self.dims[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::dim("nchw", "rank", 4, self.dims.len())),
        }
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() || dims.contains(&0) {
            return Err(Error::dim("reshape", "element count", self.data.len(), len));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Adds `other` elementwise in place.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sample `n` of a batch as a 1×C×H×W tensor.
    pub fn batch_item(&self, n: usize) -> Result<Tensor> {
        let [bn, c, h, w] = self.nchw()?;
        if n >= bn {
            return Err(Error::dim("batch_item", "batch", format!("< {bn}"), n));
        }
        let size = c * h * w;
        Tensor::new(&[1, c, h, w], self.data[n * size..(n + 1) * size].to_vec())
    }

    /// Stacks 1×C×H×W (or N×C×H×W) tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack_batch of zero tensors".into()))?;
        let [_, c, h, w] = first.nchw()?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.nchw()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::dim(
                    "stack_batch",
                    "C×H×W",
                    format!("{c}×{h}×{w}"),
                    format!("{tc}×{th}×{tw}"),
                ));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&[n, c, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
