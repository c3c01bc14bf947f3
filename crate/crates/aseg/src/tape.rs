//! Reverse-mode differentiation tape.
//!
//! The tape is a Wengert list: every differentiable operation appends one
//! node holding a backward rule, so nodes are in topological order by
//! construction. [`Tape::backward`] walks the list once in reverse, taking
//! each intermediate gradient exactly when it is complete and scattering it
//! into the gradients of the node's inputs. Gradients of variables persist on
//! the tape and accumulate across repeated `backward` calls until
//! [`Tape::zero_grad`].
//!
//! A tape and its tensors are confined to one worker; any parallelism lives
//! inside individual kernels and keeps each output element's reduction order
//! sequential, so results are bit-reproducible run to run.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{TensorError, TensorResult};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Index of a recorded node on its tape.
pub type NodeId = usize;

/// Backward rule of one recorded operation.
///
/// `grad_out` is the (complete) gradient of the loss w.r.t. the node's
/// output; implementations scatter contributions into input gradients
/// through the [`GradSink`].
pub(crate) trait Backward<T: Scalar> {
    fn apply(&self, grad_out: &[T], sink: &mut GradSink<'_, T>);
}

struct Node<T: Scalar> {
    numel: usize,
    op: Option<Box<dyn Backward<T>>>,
}

/// Mutable view of the gradient buffers during a backward sweep.
pub(crate) struct GradSink<'a, T: Scalar> {
    numels: &'a [usize],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    /// Gradient buffer of `node`, zero-initialized on first touch.
    /// Contributions must be added, never assigned.
    pub fn accum(&mut self, node: NodeId) -> &mut [T] {
        let slot = &mut self.grads[node];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.numels[node]]);
        }
        slot.as_mut().unwrap()
    }
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

/// Recording tape for reverse-mode differentiation.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Number of recorded nodes (variables included).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `t` as a differentiable variable: the returned tensor shares
    /// the data of `t` and will receive a gradient from [`Tape::backward`].
    pub fn var(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push(t.numel(), None);
        Tensor::from_parts(t.shape(), t.data_arc(), Some(id), Some(self.clone()))
    }

    fn push(&self, numel: usize, op: Option<Box<dyn Backward<T>>>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { numel, op });
        inner.grads.push(None);
        id
    }

    /// Accumulated gradient of `t`, if any backward pass has reached it.
    pub fn grad(&self, t: &Tensor<T>) -> Option<Vec<T>> {
        let node = t.node()?;
        self.inner.borrow().grads[node].clone()
    }

    /// Clears every gradient buffer on the tape.
    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }

    /// Propagates `d loss / d node` to every variable reachable from `loss`.
    ///
    /// `loss` must be a scalar recorded on this tape. Variable gradients
    /// accumulate additively across repeated calls; intermediate gradients
    /// are transient per sweep.
    pub fn backward(&self, loss: &Tensor<T>) -> TensorResult<()> {
        let seed = loss.node().ok_or(TensorError::NotOnTape)?;
        match loss.tape() {
            Some(t) if self.same_tape(&t) => {}
            _ => return Err(TensorError::NotOnTape),
        }
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape()));
        }

        let mut inner = self.inner.borrow_mut();
        let TapeInner { nodes, grads } = &mut *inner;

        match &mut grads[seed] {
            Some(g) => g[0] = g[0] + T::one(),
            slot => *slot = Some(vec![T::one()]),
        }

        let numels: Vec<usize> = nodes.iter().map(|n| n.numel).collect();
        for id in (0..=seed).rev() {
            if nodes[id].op.is_none() {
                continue; // variable: gradient stays on the tape
            }
            let Some(g) = grads[id].take() else {
                continue; // not reachable from the loss
            };
            let mut sink = GradSink {
                numels: &numels,
                grads,
            };
            nodes[id].op.as_ref().unwrap().apply(&g, &mut sink);
        }
        Ok(())
    }
}

/// Resolves the common tape of an operation's tracked inputs.
///
/// Mixing tensors from two different tapes is a programming error and
/// panics; constants (tensors without a tape) combine with anything.
pub(crate) fn common_tape<T: Scalar>(inputs: &[&Tensor<T>]) -> Option<Tape<T>> {
    let mut found: Option<Tape<T>> = None;
    for t in inputs {
        if let Some(tape) = t.tape() {
            match &found {
                None => found = Some(tape),
                Some(f) => {
                    assert!(f.same_tape(&tape), "operands belong to different tapes");
                }
            }
        }
    }
    found
}

/// Records the output of an operation, building the backward rule only when
/// some input is tracked.
pub(crate) fn record<T: Scalar, F>(
    inputs: &[&Tensor<T>],
    shape: Shape,
    data: Vec<T>,
    make_op: F,
) -> Tensor<T>
where
    F: FnOnce() -> Box<dyn Backward<T>>,
{
    record_arc(inputs, shape, Arc::new(data), make_op)
}

/// [`record`] for operations that reuse an existing buffer (views).
pub(crate) fn record_arc<T: Scalar, F>(
    inputs: &[&Tensor<T>],
    shape: Shape,
    data: Arc<Vec<T>>,
    make_op: F,
) -> Tensor<T>
where
    F: FnOnce() -> Box<dyn Backward<T>>,
{
    debug_assert_eq!(shape.numel(), data.len());
    match common_tape(inputs) {
        Some(tape) => {
            let id = tape.push(shape.numel(), Some(make_op()));
            Tensor::from_parts(shape, data, Some(id), Some(tape))
        }
        None => Tensor::from_parts(shape, data, None, None),
    }
}

/// Adds `src` into `dst` elementwise.
#[inline]
pub(crate) fn axpy_one<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}
