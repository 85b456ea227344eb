//! Dense N-dimensional tensors with tape-based reverse-mode autodiff.
//!
//! Activations use NCHW layout. Every primitive lives on [`Tape`]; a record is
//! appended whenever an input requires gradients, and [`Tape::backward`] walks
//! the records in exact reverse order.

pub mod checkpoint;
mod conv;
mod kernels;
pub mod optim;
mod tape;

pub use conv::ConvAttrs;
pub use kernels::{shuffle_groups, shuffle_order, BnMode, PoolAttrs};
pub use optim::{cosine_lr, Adam, Sgd};
pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element dtype tag as stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` (search) and `f64` (tests).
pub trait Element: num_traits::Float + fmt::Debug + fmt::Display + Default + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
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
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
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

struct TensorInner<E> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: Cell<bool>,
}

/// A dense tensor. Cheap to clone (shared storage); data is immutable once
/// produced except through optimizer steps.
pub struct Tensor<E: Element> {
    inner: Rc<TensorInner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad_flag())
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![E::zero(); numel]).unwrap()
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).unwrap()
    }

    pub fn scalar(value: E) -> Self {
        Tensor::from_vec(vec![1], vec![value]).unwrap()
    }

    /// Marks this tensor as a trainable leaf.
    pub fn requires_grad(self) -> Self {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggles gradient tracking in place (used to freeze parameter groups).
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| Element::as_f64(*v)).collect()
    }

    /// Current gradient, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient accumulator, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![E::one(); self.numel()]);
    }

    /// Replaces the stored values. Shape must be preserved; used by optimizers
    /// and parameter loading.
    pub fn set_data(&self, values: &[E]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                detail: format!("expected {} elements, got {}", self.numel(), values.len()),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Pointer identity; two clones of one tensor share it.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

/// Flat index helpers for NCHW activations.
#[inline]
pub(crate) fn nchw_index(c_extent: usize, h_extent: usize, w_extent: usize, n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * c_extent + c) * h_extent + h) * w_extent + w
}

pub(crate) fn check_activation<E: Element>(op: &'static str, x: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected rank-4 NCHW input, got shape {:?}", s),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}
