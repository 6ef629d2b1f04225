//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle (cheap to clone) onto a row-major value
//! buffer plus an optional gradient buffer. Differentiable operations live on
//! [`Tape`]; running them records enough information to replay the chain rule
//! in exact reverse execution order via [`Tape::backward`].
//!
//! Zero-sized dimensions are allowed (an empty prompt is a `0×D` tensor).

mod kernels;
mod tape;

pub use tape::Tape;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

struct Inner<F> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<F>>>,
}

/// Shared handle to a dense row-major tensor.
///
/// Cloning copies the handle, not the buffer; two clones observe the same
/// values and the same gradient slot. Deep copies go through
/// [`Tensor::detached_copy`].
pub struct Tensor<F: Scalar> {
    inner: Rc<Inner<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::raw(shape, data, false))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self::raw(shape, vec![F::zero(); n], false)
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = numel_of(&shape);
        Self::raw(shape, vec![value; n], false)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: F) -> Self {
        Self::raw(Vec::new(), vec![value], false)
    }

    /// Elements drawn i.i.d. from `uniform(lo, hi)`.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = numel_of(&shape);
        let data = (0..n)
            .map(|_| F::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Self::raw(shape, data, false)
    }

    /// Marks the tensor trainable and returns it (builder style).
    pub fn trainable(self) -> Self {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
        if !value {
            *self.inner.grad.borrow_mut() = None;
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.inner.data.borrow().clone()
    }

    /// Value of a rank-0 / single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[F]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Deep copy with no gradient state and `requires_grad = false`.
    pub fn detached_copy(&self) -> Self {
        Self::raw(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// True when both handles point at the same buffer.
    pub fn same_buffer(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Tensor<f64> {
    /// Bit pattern of the value buffer; distinguishes `-0.0` from `0.0`,
    /// which plain `==` does not. Used for byte-level equality checks.
    pub fn data_bits(&self) -> Vec<u64> {
        self.data().iter().map(|x| x.to_bits()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn zero_dims_are_allowed() {
        let t = Tensor::<f64>::zeros(vec![0, 3]);
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn grad_accumulates() {
        let t = Tensor::<f64>::zeros(vec![2]).trainable();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn clone_shares_buffer() {
        let t = Tensor::<f64>::zeros(vec![2]);
        let u = t.clone();
        u.data_mut()[0] = 7.0;
        assert_eq!(t.data()[0], 7.0);
        assert!(t.same_buffer(&u));
        assert!(!t.same_buffer(&t.detached_copy()));
    }
}
