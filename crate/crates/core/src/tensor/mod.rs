//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Every operation records its inputs on the output node when gradients are
//! enabled and at least one input requires a gradient. [`Tensor::backward`]
//! collects the reachable nodes into a [`Tape`], ordered by creation id, and
//! replays the recorded rules in reverse. Leaf tensors created with
//! [`Tensor::param`] accumulate their gradient; intermediate gradients are
//! dropped once propagated.
//!
//! A tensor graph is a single-threaded unit (`Rc` inside). Send parameter
//! values across threads as plain `Vec`s (see [`crate::checkpoint::TensorStore`]).

mod blob;
mod init;
mod kernels;
mod ops;
mod scalar;
mod tape;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use blob::{decode_blob, encode_blob, BLOB_MAGIC};
pub use init::{derive_rng, he_normal, truncated_normal, Init, SeededRng};
pub use ops::{concat, Reduction};
pub use scalar::{Precision, Scalar};
pub use tape::Tape;

use crate::error::{Error, Result};
use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operation for differentiation.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

/// Reference-counted handle to a node of the computation graph.
///
/// Cloning is cheap and aliases the same storage.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let grad = if requires_grad && op.is_none() {
            Some(vec![T::zero(); data.len()])
        } else {
            None
        };
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad: Cell::new(requires_grad),
            grad: RefCell::new(grad),
            op,
        }))
    }

    /// Constant (non-trainable) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        check_finite("new", &data)?;
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor; gradients accumulate into it on backward.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value], false, None)
    }

    /// Output of an operation. Records `op` only when differentiation is on
    /// and some input needs a gradient.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs_require_grad: bool,
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Self> {
        check_finite(name, &data)?;
        let track = inputs_require_grad && grad_enabled();
        let op = if track { Some(op()) } else { None };
        Ok(Self::from_parts(shape, data, track, op))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Toggles gradient tracking on a leaf. The gradient buffer exists exactly
    /// while tracking is on.
    pub fn set_requires_grad(&self, on: bool) {
        assert!(self.is_leaf(), "set_requires_grad on a non-leaf tensor");
        self.0.requires_grad.set(on);
        *self.0.grad.borrow_mut() = on.then(|| vec![T::zero(); self.numel()]);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Overwrites leaf values in place. Panics on a non-leaf.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        assert!(self.is_leaf(), "update_data on a non-leaf tensor");
        f(&mut self.0.data.borrow_mut());
    }

    /// Replaces leaf values; errors on length mismatch or non-finite input.
    pub fn assign(&self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape(
                "assign",
                format!("tensor {:?} given {} values", self.shape(), values.len()),
            ));
        }
        check_finite("assign", values)?;
        self.update_data(|d| d.copy_from_slice(values));
        Ok(())
    }

    /// Fresh constant leaf holding a copy of the values.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// True when both handles alias the same storage.
    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Accumulates gradients of this one-element loss into every reachable
    /// leaf that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        Tape::record(self).backward()
    }

    pub(crate) fn node(&self) -> &Node<T> {
        &self.0
    }
}
