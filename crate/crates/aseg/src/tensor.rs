//! Dense rank-4 tensors.
//!
//! A [`Tensor`] owns its elements in row-major NCHW order behind an `Arc`,
//! so clones and captures by backward rules are cheap. Tensors are immutable
//! values once created; the only mutation path is [`Tensor::data_mut`], used
//! by the optimizer on parameter stores that are not attached to a tape.

use std::sync::Arc;

use rand::Rng;

use crate::error::{TensorError, TensorResult};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{NodeId, Tape};

/// Dense rank-4 array of `T` with optional tape tracking.
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Arc<Vec<T>>,
    node: Option<NodeId>,
    tape: Option<Tape<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: self.node,
            tape: self.tape.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor<{}>({}, tracked: {})",
            T::NAME,
            self.shape,
            self.node.is_some()
        )
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.numel(),
            data.len(),
            "shape {} does not match {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            tape: None,
        }
    }

    pub fn from_f64_slice(shape: impl Into<Shape>, data: &[f64]) -> Self {
        Tensor::from_vec(shape, data.iter().map(|&x| T::from_f64c(x)).collect())
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Tensor::from_vec(shape, vec![T::zero(); shape.numel()])
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor::from_vec(shape, vec![value; shape.numel()])
    }

    /// Uniform draw from `(-limit, limit)`, sampled in f64 so the f32 and
    /// f64 modes see the same stream.
    pub fn uniform(shape: impl Into<Shape>, limit: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| T::from_f64c(rng.gen_range(-limit..limit)))
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub(crate) fn from_parts(
        shape: Shape,
        data: Arc<Vec<T>>,
        node: Option<NodeId>,
        tape: Option<Tape<T>>,
    ) -> Self {
        Tensor {
            shape,
            data,
            node,
            tape,
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the elements, copy-on-write if the buffer is shared.
    /// Only meaningful for untracked tensors (parameter stores).
    pub fn data_mut(&mut self) -> &mut [T] {
        debug_assert!(self.node.is_none(), "mutating a tracked tensor");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    #[inline]
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn tape(&self) -> Option<Tape<T>> {
        self.tape.clone()
    }

    /// Whether this tensor participates in differentiation.
    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    /// Accumulated gradient, if this tensor is a tracked node whose tape has
    /// run backward through it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.tape.as_ref()?.grad(self)
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Shape>) -> TensorResult<Tensor<T>> {
        let to = shape.into();
        if to.numel() != self.numel() {
            return Err(TensorError::Reshape {
                from: self.shape,
                to,
                from_numel: self.numel(),
                to_numel: to.numel(),
            });
        }
        Ok(crate::ops::reshape_impl(self, to))
    }

    /// Detached copy: same values, no tape.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
            tape: None,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}
