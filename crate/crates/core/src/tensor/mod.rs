//! Dense tensors with reverse-mode differentiation.
//!
//! Layout is row-major with axis order `(batch, channel, depth, height, width)`
//! for volumetric data. A [`Tensor`] is an immutable value; the only mutable
//! state it carries is its accumulated gradient, written by
//! [`Tape::backward`] and cleared explicitly with [`Tensor::zero_grad`].

mod checkpoint;
mod meter;
mod ops;
mod tape;

use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use num_traits::Float;

pub use checkpoint::{read_checkpoint, read_tensor, write_checkpoint, write_tensor, CHECKPOINT_MAGIC, TENSOR_MAGIC};
pub use meter::MemoryMeter;
pub use ops::Elementwise;
pub use tape::{Backward, Mode, NodeRef, Tape};

use crate::error::{Error, Result};

/// Scalar types a tensor can hold.
pub trait Element:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// Dtype code used by the `VXT1` format.
    const DTYPE: u8;
    const NAME: &'static str;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: u8 = 0;
    const NAME: &'static str = "f32";

    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: u8 = 1;
    const NAME: &'static str = "f64";

    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn bytes_of<T>(n: usize) -> usize {
    n * std::mem::size_of::<T>()
}

struct Inner<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<NodeRef>,
}

/// Dense n-dimensional value, optionally a node on a [`Tape`].
///
/// Cloning is cheap and shares the underlying buffer and gradient.
pub struct Tensor<T: Element>(Arc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &T::NAME)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("node", &self.0.node)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        if numel(shape) != data_len {
            return Err(Error::invalid(
                "tensor",
                format!("data length {data_len} does not match shape {shape:?}"),
            ));
        }
        Ok(())
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf tensor.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(vec![value; numel(shape)], shape).expect("positive extents")
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], vec![1], false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    pub(crate) fn from_node(data: Vec<T>, shape: Vec<usize>, node: NodeRef) -> Self {
        Self::build(data, shape, true, Some(node))
    }

    pub(crate) fn plain(data: Vec<T>, shape: Vec<usize>) -> Self {
        Self::build(data, shape, false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// First element; convenient for scalar results such as losses.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.0.node
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Same values, no gradient, no tape node.
    pub fn detach(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Same values as a fresh trainable leaf, disconnected from any tape.
    pub fn detach_as_leaf(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn grad_lock(&self) -> MutexGuard<'_, Option<Vec<T>>> {
        self.0.grad.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad_lock().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.grad_lock().is_some()
    }

    /// Run `f` on the gradient buffer without copying it.
    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[T]>) -> R) -> R {
        let g = self.grad_lock();
        f(g.as_deref())
    }

    pub fn zero_grad(&self) {
        *self.grad_lock() = None;
    }

    /// Multiply the accumulated gradient by `factor` in place.
    pub fn scale_grad(&self, factor: T) {
        if let Some(g) = self.grad_lock().as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Adds `delta` into the gradient buffer. Returns true when a new buffer
    /// had to be allocated.
    pub(crate) fn accumulate_grad(&self, delta: Vec<T>) -> bool {
        debug_assert!(self.0.requires_grad);
        debug_assert_eq!(delta.len(), self.numel());
        let mut g = self.grad_lock();
        match g.as_mut() {
            Some(buf) => {
                buf.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b);
                false
            }
            None => {
                *g = Some(delta);
                true
            }
        }
    }

    /// Reinterpret as another shape with the same element count (no tape).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Self::new(self.0.data.clone(), shape)
    }
}
