//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle onto a node in a define-by-run graph: every
//! operation allocates a fresh node recording its inputs, and
//! [`Tensor::backward`] replays the graph in reverse topological order. The
//! graph for a step is rebuilt on each forward pass and dropped with the loss
//! handle; parameters are long-lived leaves whose `grad` buffers persist and
//! accumulate across `backward` calls until explicitly reset.
//!
//! Graphs are single-threaded by construction (`Rc` handles); parallelism
//! lives one level up, across independent runs.

mod backward;
mod gradcheck;
mod ops;

pub use gradcheck::finite_difference_check;
pub(crate) use ops::Op;

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: Option<Op>,
}

/// Handle onto one node of the computation graph. Cloning is O(1) and
/// aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: None,
                op,
            })),
        }
    }

    /// Trainable leaf from shape and values known to agree.
    pub(crate) fn make_param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(numel_of(&shape), data.len());
        Tensor::make(shape, data, true, None)
    }

    /// Leaf tensor from explicit shape and values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::make(shape, data, false, None))
    }

    /// 2-D leaf from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(vec![], vec![v], false, None)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor::make(shape, vec![0.0; n], false, None)
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Tensor {
        let n = numel_of(&shape);
        Tensor::make(shape, vec![v; n], false, None)
    }

    /// Mark this leaf as a trainable parameter.
    pub fn with_grad(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the stored values.
    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::NotScalar {
                shape: inner.shape.clone(),
            });
        }
        Ok(inner.data[0])
    }

    /// Overwrite the stored values in place (shapes must agree).
    pub fn set_values(&self, data: &[f64]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.data.len() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_values",
                lhs: inner.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        inner.data.copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn borrow(&self) -> Ref<'_, Inner> {
        self.inner.borrow()
    }

    pub(crate) fn borrow_mut(&self) -> RefMut<'_, Inner> {
        self.inner.borrow_mut()
    }

    pub(crate) fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        let inner = self.inner.borrow();
        match inner.shape.as_slice() {
            [n, d] => Ok((*n, *d)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: inner.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}
