//! Elementwise arithmetic, broadcasting, concatenation and summation.

use std::sync::Arc;

use crate::error::{TensorError, TensorResult};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{axpy_one, record, record_arc, Backward, GradSink, NodeId};
use crate::tensor::Tensor;

/// Per-dimension element strides of `shape` when broadcast against a larger
/// one: extent-1 dimensions contribute stride 0.
fn broadcast_strides(shape: Shape) -> [usize; 4] {
    let [n, c, h, w] = shape.0;
    let mut s = [c * h * w, h * w, w, 1];
    for (i, &e) in [n, c, h, w].iter().enumerate() {
        if e == 1 {
            s[i] = 0;
        }
    }
    s
}

fn broadcast_compatible(x: Shape, b: Shape) -> bool {
    x.0.iter().zip(b.0.iter()).all(|(&xe, &be)| be == xe || be == 1)
}

/// Applies `f(x_index, b_index)` over every element of `x` with `b`
/// broadcast along its extent-1 dimensions.
fn for_each_broadcast(x: Shape, b: Shape, mut f: impl FnMut(usize, usize)) {
    let sb = broadcast_strides(b);
    let mut xi = 0;
    for n in 0..x.n() {
        for c in 0..x.c() {
            for h in 0..x.h() {
                let base = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..x.w() {
                    f(xi, base + w * sb[3]);
                    xi += 1;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// add / mul / div (same shape)
// ---------------------------------------------------------------------------

struct AddBackward {
    a: Option<NodeId>,
    b: Option<NodeId>,
}

impl<T: Scalar> Backward<T> for AddBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(n) = self.a {
            axpy_one(sink.accum(n), go);
        }
        if let Some(n) = self.b {
            axpy_one(sink.accum(n), go);
        }
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(record(&[a, b], a.shape(), data, || {
        Box::new(AddBackward {
            a: a.node(),
            b: b.node(),
        })
    }))
}

struct MulBackward<T: Scalar> {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Arc<Vec<T>>,
    b_data: Arc<Vec<T>>,
}

impl<T: Scalar> Backward<T> for MulBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(n) = self.a {
            let ga = sink.accum(n);
            for i in 0..go.len() {
                ga[i] = ga[i] + go[i] * self.b_data[i];
            }
        }
        if let Some(n) = self.b {
            let gb = sink.accum(n);
            for i in 0..go.len() {
                gb[i] = gb[i] + go[i] * self.a_data[i];
            }
        }
    }
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(record(&[a, b], a.shape(), data, || {
        Box::new(MulBackward {
            a: a.node(),
            b: b.node(),
            a_data: a.data_arc(),
            b_data: b.data_arc(),
        })
    }))
}

struct DivBackward<T: Scalar> {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Arc<Vec<T>>,
    b_data: Arc<Vec<T>>,
}

impl<T: Scalar> Backward<T> for DivBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(n) = self.a {
            let ga = sink.accum(n);
            for i in 0..go.len() {
                ga[i] = ga[i] + go[i] / self.b_data[i];
            }
        }
        if let Some(n) = self.b {
            let gb = sink.accum(n);
            for i in 0..go.len() {
                let b = self.b_data[i];
                gb[i] = gb[i] - go[i] * self.a_data[i] / (b * b);
            }
        }
    }
}

pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "div",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
    Ok(record(&[a, b], a.shape(), data, || {
        Box::new(DivBackward {
            a: a.node(),
            b: b.node(),
            a_data: a.data_arc(),
            b_data: b.data_arc(),
        })
    }))
}

// ---------------------------------------------------------------------------
// broadcasting add / mul
// ---------------------------------------------------------------------------

struct MulBroadcastBackward<T: Scalar> {
    x: Option<NodeId>,
    g: Option<NodeId>,
    x_data: Arc<Vec<T>>,
    g_data: Arc<Vec<T>>,
    x_shape: Shape,
    g_shape: Shape,
}

impl<T: Scalar> Backward<T> for MulBroadcastBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(n) = self.x {
            let gx = sink.accum(n);
            for_each_broadcast(self.x_shape, self.g_shape, |xi, gi| {
                gx[xi] = gx[xi] + go[xi] * self.g_data[gi];
            });
        }
        if let Some(n) = self.g {
            let gg = sink.accum(n);
            for_each_broadcast(self.x_shape, self.g_shape, |xi, gi| {
                gg[gi] = gg[gi] + go[xi] * self.x_data[xi];
            });
        }
    }
}

/// `x * g` with `g` broadcast along its extent-1 dimensions.
///
/// Used for the attention gates: a `Nx Cx 1x 1` channel gate, a `Nx 1x Hx W`
/// spatial gate or a `1x1x1x1` scalar weight against a full feature map.
pub fn mul_broadcast<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if !broadcast_compatible(x.shape(), g.shape()) {
        return Err(TensorError::Broadcast {
            op: "mul_broadcast",
            lhs: x.shape(),
            rhs: g.shape(),
        });
    }
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        let gd = g.data();
        for_each_broadcast(x.shape(), g.shape(), |xi, gi| data[xi] = xd[xi] * gd[gi]);
    }
    Ok(record(&[x, g], x.shape(), data, || {
        Box::new(MulBroadcastBackward {
            x: x.node(),
            g: g.node(),
            x_data: x.data_arc(),
            g_data: g.data_arc(),
            x_shape: x.shape(),
            g_shape: g.shape(),
        })
    }))
}

struct AddBroadcastBackward {
    x: Option<NodeId>,
    b: Option<NodeId>,
    x_shape: Shape,
    b_shape: Shape,
}

impl<T: Scalar> Backward<T> for AddBroadcastBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(n) = self.x {
            axpy_one(sink.accum(n), go);
        }
        if let Some(n) = self.b {
            let gb = sink.accum(n);
            for_each_broadcast(self.x_shape, self.b_shape, |xi, bi| {
                gb[bi] = gb[bi] + go[xi];
            });
        }
    }
}

/// `x + b` with `b` broadcast along its extent-1 dimensions.
pub fn add_broadcast<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    if !broadcast_compatible(x.shape(), b.shape()) {
        return Err(TensorError::Broadcast {
            op: "add_broadcast",
            lhs: x.shape(),
            rhs: b.shape(),
        });
    }
    let mut data = vec![T::zero(); x.numel()];
    {
        let xd = x.data();
        let bd = b.data();
        for_each_broadcast(x.shape(), b.shape(), |xi, bi| data[xi] = xd[xi] + bd[bi]);
    }
    Ok(record(&[x, b], x.shape(), data, || {
        Box::new(AddBroadcastBackward {
            x: x.node(),
            b: b.node(),
            x_shape: x.shape(),
            b_shape: b.shape(),
        })
    }))
}

// ---------------------------------------------------------------------------
// constant scale / shift
// ---------------------------------------------------------------------------

struct ScaleBackward<T: Scalar> {
    x: NodeId,
    k: T,
}

impl<T: Scalar> Backward<T> for ScaleBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let gx = sink.accum(self.x);
        for i in 0..go.len() {
            gx[i] = gx[i] + go[i] * self.k;
        }
    }
}

/// `k * x` for an untracked scalar constant `k`.
pub fn scale<T: Scalar>(x: &Tensor<T>, k: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * k).collect();
    record(&[x], x.shape(), data, || {
        Box::new(ScaleBackward {
            x: x.node().unwrap(),
            k,
        })
    })
}

struct AddScalarBackward {
    x: NodeId,
}

impl<T: Scalar> Backward<T> for AddScalarBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        axpy_one(sink.accum(self.x), go);
    }
}

/// `x + k` for an untracked scalar constant `k`.
pub fn add_scalar<T: Scalar>(x: &Tensor<T>, k: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v + k).collect();
    record(&[x], x.shape(), data, || {
        Box::new(AddScalarBackward {
            x: x.node().unwrap(),
        })
    })
}

// ---------------------------------------------------------------------------
// concatenation along channels
// ---------------------------------------------------------------------------

struct ConcatBackward {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_shape: Shape,
    b_shape: Shape,
}

impl<T: Scalar> Backward<T> for ConcatBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let (n, ca, cb) = (self.a_shape.n(), self.a_shape.c(), self.b_shape.c());
        let plane = self.a_shape.h() * self.a_shape.w();
        let out_item = (ca + cb) * plane;
        if let Some(id) = self.a {
            let ga = sink.accum(id);
            for ni in 0..n {
                let src = &go[ni * out_item..ni * out_item + ca * plane];
                axpy_one(&mut ga[ni * ca * plane..(ni + 1) * ca * plane], src);
            }
        }
        if let Some(id) = self.b {
            let gb = sink.accum(id);
            for ni in 0..n {
                let src = &go[ni * out_item + ca * plane..(ni + 1) * out_item];
                axpy_one(&mut gb[ni * cb * plane..(ni + 1) * cb * plane], src);
            }
        }
    }
}

/// Concatenates two tensors along the channel extent.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            lhs: sa,
            rhs: sb,
        });
    }
    let out = Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w());
    let plane = sa.h() * sa.w();
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..sa.n() {
        data.extend_from_slice(&a.data()[n * sa.c() * plane..(n + 1) * sa.c() * plane]);
        data.extend_from_slice(&b.data()[n * sb.c() * plane..(n + 1) * sb.c() * plane]);
    }
    Ok(record(&[a, b], out, data, || {
        Box::new(ConcatBackward {
            a: a.node(),
            b: b.node(),
            a_shape: sa,
            b_shape: sb,
        })
    }))
}

// ---------------------------------------------------------------------------
// slicing along W
// ---------------------------------------------------------------------------

struct SliceWBackward {
    x: NodeId,
    x_shape: Shape,
    index: usize,
}

impl<T: Scalar> Backward<T> for SliceWBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let gx = sink.accum(self.x);
        let w = self.x_shape.w();
        for (row, &g) in go.iter().enumerate() {
            gx[row * w + self.index] = gx[row * w + self.index] + g;
        }
    }
}

/// Selects index `i` along the last extent: `NxCxHxW -> NxCxHx1`.
pub fn slice_w<T: Scalar>(x: &Tensor<T>, i: usize) -> TensorResult<Tensor<T>> {
    let s = x.shape();
    if i >= s.w() {
        return Err(TensorError::ShapeMismatch {
            op: "slice_w",
            lhs: s,
            rhs: Shape::new(s.n(), s.c(), s.h(), i + 1),
        });
    }
    let rows = s.n() * s.c() * s.h();
    let data = (0..rows).map(|r| x.data()[r * s.w() + i]).collect();
    let out = Shape::new(s.n(), s.c(), s.h(), 1);
    Ok(record(&[x], out, data, || {
        Box::new(SliceWBackward {
            x: x.node().unwrap(),
            x_shape: s,
            index: i,
        })
    }))
}

// ---------------------------------------------------------------------------
// reduction to a scalar
// ---------------------------------------------------------------------------

struct SumBackward {
    x: NodeId,
}

impl<T: Scalar> Backward<T> for SumBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let g = go[0];
        let gx = sink.accum(self.x);
        for v in gx.iter_mut() {
            *v = *v + g;
        }
    }
}

/// Sum of all elements as a `1x1x1x1` tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in x.data() {
        acc = acc + v;
    }
    record(&[x], Shape::new(1, 1, 1, 1), vec![acc], || {
        Box::new(SumBackward {
            x: x.node().unwrap(),
        })
    })
}

// ---------------------------------------------------------------------------
// reshape
// ---------------------------------------------------------------------------

struct ReshapeBackward {
    x: NodeId,
}

impl<T: Scalar> Backward<T> for ReshapeBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        axpy_one(sink.accum(self.x), go);
    }
}

pub(crate) fn reshape_impl<T: Scalar>(x: &Tensor<T>, to: Shape) -> Tensor<T> {
    record_arc(&[x], to, x.data_arc(), || {
        Box::new(ReshapeBackward {
            x: x.node().unwrap(),
        })
    })
}
