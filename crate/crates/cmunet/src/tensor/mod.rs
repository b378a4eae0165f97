//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are rank 1..=4 row-major arrays (rank 4 read as N, C, H, W).
//! Forward ops never mutate their inputs; each op that participates in
//! differentiation records a node on a [`Tape`], and `Tape::backward`
//! replays the nodes in exact reverse execution order.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod scalar;
mod tape;

pub use conv::{conv2d, conv2d_output_hw, Conv2dSpec};
pub use gradcheck::{
    check_op, finite_diff_gradient, max_autodiff_fd_error, max_rel_err, op_names, GradReport,
};
pub use norm::{batchnorm2d, BnState};
pub use ops::{
    activation, add, bce_with_logits, bilinear_upsample2x, concat_channels, dice_loss_kernel,
    maxpool2x2, mean, mul, scale, sum, Activation,
};
pub use scalar::{Dtype, Scalar};
pub use tape::{NodeInfo, OpKind, Tape};

use crate::error::{shape_err, Result};
use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Batch-norm / model execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub type TensorId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<T: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    /// Mutated only by the optimizer and by buffer updates, never by ops.
    data: RefCell<Vec<T>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
}

/// Shared handle to a dense array. Cloning is cheap (reference count bump).
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            self.requires_grad()
        )
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 4 {
            return Err(shape_err!("tensor", "rank must be 1..=4, got {}", shape.len()));
        }
        if data.len() != numel {
            return Err(shape_err!(
                "tensor",
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            ));
        }
        Ok(Self::new_unchecked(data, shape.to_vec(), false))
    }

    fn new_unchecked(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
            }),
        }
    }

    /// Internal constructor for op outputs; shape validity is the op's job.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self::new_unchecked(data, shape, false)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(vec![T::ZERO; numel], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(vec![value; numel], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new_unchecked(vec![value], vec![1], false)
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    /// Interpret as N×C×H×W.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.inner.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!(op, "expected rank-4 N×C×H×W tensor, got shape {:?}", self.shape())),
        }
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    /// Mutable access to the raw storage. Reserved for the optimizer,
    /// batch-norm buffers, and checkpoint loading.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.inner.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                assert_eq!(acc.len(), g.len(), "gradient length mismatch");
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn seed_grad(&self, seed: T) {
        *self.inner.grad.borrow_mut() = Some(vec![seed; self.len()]);
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_len() {
        assert!(Tensor::<f32>::from_vec(vec![1.0; 6], &[2, 3]).is_ok());
        let err = Tensor::<f32>::from_vec(vec![1.0; 5], &[2, 3]).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    // Zero channel counts are legal so that concatenation with an empty
    // tensor degenerates to the identity.
    #[test]
    fn zero_extent_tensor_is_empty() {
        let t = Tensor::<f32>::zeros(&[2, 0, 3]).unwrap();
        assert_eq!(t.len(), 0);
        assert!(t.is_empty());
    }

    #[test]
    fn grad_accumulates_elementwise() {
        let t = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        t.accumulate_grad(&[0.5, 1.0]);
        t.accumulate_grad(&[0.25, -1.0]);
        assert_eq!(t.grad().unwrap(), vec![0.75, 0.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
