//! Dense tensors with reverse-mode gradients.
//!
//! A [`Tensor`] is an immutable row-major buffer plus an optional link to the
//! operation that produced it. Operations on tracked tensors record a backward
//! closure; [`Tensor::backward`] walks that graph once in reverse topological
//! order and accumulates gradients into every tracked ancestor.
//!
//! Values are held as `f64`. A tensor whose dtype is [`DType::F32`] keeps every
//! stored value rounded to the nearest `f32`, so float32 results carry float32
//! storage error while reductions still accumulate in double precision.

mod autograd;
mod broadcast;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use layers::{BatchNormParams, ConvParams, LinearParams, Parameters, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Result dtype of an operation mixing `self` and `other`.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "float32"),
            DType::F64 => write!(f, "float64"),
        }
    }
}

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice says which parents actually need one.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    tracked: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} holds {n} values, buffer has {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, dtype: DType, data: Vec<f64>, tracked: bool, node: Option<Node>) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                dtype,
                data,
                tracked,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Float64 tensor from a row-major buffer.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::with_dtype(shape, data, DType::F64)
    }

    /// Tensor of the given dtype; float32 values are rounded on entry.
    pub fn with_dtype(shape: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        Ok(Tensor::build(shape.to_vec(), dtype, data, false, None))
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Tensor> {
        Tensor::with_dtype(shape, data.iter().map(|&v| v as f64).collect(), DType::F32)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::build(vec![1], DType::F64, vec![v], false, None)
    }

    pub fn full(shape: &[usize], v: f64, dtype: DType) -> Tensor {
        let n = shape.iter().product();
        Tensor::with_dtype(shape, vec![v; n], dtype).expect("full: invalid shape")
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::full(shape, 1.0, dtype)
    }

    /// Samples from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, dtype: DType, rng: &mut R) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::with_dtype(shape, data, dtype).expect("randn: invalid shape")
    }

    /// Samples uniformly from [lo, hi).
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, dtype: DType, rng: &mut R) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::with_dtype(shape, data, dtype).expect("uniform: invalid shape")
    }

    /// Output of an operation. The node is kept only if some parent is tracked.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        dtype: DType,
        mut data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        let tracked = parents.iter().any(|p| p.is_tracked());
        let node = tracked.then(|| Node { parents, backward });
        Tensor::build(shape, dtype, data, tracked, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Extents of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::shape(op, format!("expected rank-4 [N,C,H,W], got {s:?}"))),
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    /// A new leaf with the same values that records gradients.
    pub fn tracked(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.dtype(), self.inner.data.clone(), true, None)
    }

    /// A new untracked leaf with the same values.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.dtype(), self.inner.data.clone(), false, None)
    }

    /// Same values converted to another dtype (untracked).
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Tensor::with_dtype(self.shape(), self.to_vec(), dtype).expect("shape already validated")
    }

    /// Accumulated gradient, if a backward pass reached this tensor.
    pub fn grad(&self) -> Option<Tensor> {
        let g = self.inner.grad.lock().expect("grad lock poisoned");
        g.as_ref()
            .map(|g| Tensor::build(self.inner.shape.clone(), DType::F64, g.clone(), false, None))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    /// True when shape, dtype and every value's bit pattern agree.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self.dtype() == other.dtype()
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn min_value(&self) -> f64 {
        self.values().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.values().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("dtype", &self.dtype())
            .field("tracked", &self.is_tracked())
            .field("values", &preview)
            .finish()
    }
}
