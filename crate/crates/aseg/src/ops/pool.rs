//! Windowed pooling, global reductions and nearest-neighbor upsampling.

use crate::error::{TensorError, TensorResult};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{record, Backward, GradSink, NodeId};
use crate::tensor::Tensor;

/// Reduction mode for pooling and the global reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

// ---------------------------------------------------------------------------
// pool2d
// ---------------------------------------------------------------------------

struct MaxPoolBackward {
    x: NodeId,
    /// Flat offset of the winning element per output element, within the
    /// whole input buffer. Ties go to the first element in row-major order.
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let gx = sink.accum(self.x);
        for (o, &src) in self.argmax.iter().enumerate() {
            gx[src] = gx[src] + go[o];
        }
    }
}

struct AvgPoolBackward {
    x: NodeId,
    x_shape: Shape,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl<T: Scalar> Backward<T> for AvgPoolBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let s = self.x_shape;
        let inv = T::one() / T::from_f64c((self.window * self.window) as f64);
        let gx = sink.accum(self.x);
        let mut o = 0;
        for n in 0..s.n() {
            for c in 0..s.c() {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let g = go[o] * inv;
                        o += 1;
                        for dy in 0..self.window {
                            for dx in 0..self.window {
                                let idx =
                                    s.index(n, c, oy * self.stride + dy, ox * self.stride + dx);
                                gx[idx] = gx[idx] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Windowed per-channel pooling. The spatial extents minus the window must
/// divide the stride exactly.
pub fn pool2d<T: Scalar>(
    x: &Tensor<T>,
    mode: PoolMode,
    window: usize,
    stride: usize,
) -> TensorResult<Tensor<T>> {
    let s = x.shape();
    if window == 0 || window > s.h() || window > s.w() {
        return Err(TensorError::PoolWindow {
            input: s,
            window,
        });
    }
    if stride == 0 || (s.h() - window) % stride != 0 || (s.w() - window) % stride != 0 {
        return Err(TensorError::PoolGeometry {
            input: s,
            window,
            stride,
        });
    }
    let oh = (s.h() - window) / stride + 1;
    let ow = (s.w() - window) / stride + 1;
    let out = Shape::new(s.n(), s.c(), oh, ow);
    let xd = x.data();
    let mut data = vec![T::zero(); out.numel()];
    let mut argmax = if mode == PoolMode::Max {
        Vec::with_capacity(out.numel())
    } else {
        Vec::new()
    };
    let mut o = 0;
    for n in 0..s.n() {
        for c in 0..s.c() {
            for oy in 0..oh {
                for ox in 0..ow {
                    match mode {
                        PoolMode::Max => {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    let idx =
                                        s.index(n, c, oy * stride + dy, ox * stride + dx);
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            data[o] = best;
                            argmax.push(best_idx);
                        }
                        PoolMode::Avg => {
                            let mut acc = T::zero();
                            for dy in 0..window {
                                for dx in 0..window {
                                    acc = acc
                                        + xd[s.index(n, c, oy * stride + dy, ox * stride + dx)];
                                }
                            }
                            data[o] = acc / T::from_f64c((window * window) as f64);
                        }
                    }
                    o += 1;
                }
            }
        }
    }
    Ok(record(&[x], out, data, || match mode {
        PoolMode::Max => Box::new(MaxPoolBackward {
            x: x.node().unwrap(),
            argmax,
        }),
        PoolMode::Avg => Box::new(AvgPoolBackward {
            x: x.node().unwrap(),
            x_shape: s,
            window,
            stride,
            oh,
            ow,
        }),
    }))
}

// ---------------------------------------------------------------------------
// global reductions
// ---------------------------------------------------------------------------

struct ReduceSpatialBackward<T: Scalar> {
    x: NodeId,
    x_shape: Shape,
    mode: PoolMode,
    argmax: Vec<usize>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Backward<T> for ReduceSpatialBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let plane = self.x_shape.h() * self.x_shape.w();
        let gx = sink.accum(self.x);
        match self.mode {
            PoolMode::Avg => {
                let inv = T::one() / T::from_f64c(plane as f64);
                for (nc, &g) in go.iter().enumerate() {
                    let g = g * inv;
                    for v in &mut gx[nc * plane..(nc + 1) * plane] {
                        *v = *v + g;
                    }
                }
            }
            PoolMode::Max => {
                for (nc, &g) in go.iter().enumerate() {
                    let idx = nc * plane + self.argmax[nc];
                    gx[idx] = gx[idx] + g;
                }
            }
        }
    }
}

/// Global per-channel reduction over `HxW`: `NxCxHxW -> NxCx1x1`.
pub fn reduce_spatial<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> TensorResult<Tensor<T>> {
    let s = x.shape();
    let plane = s.h() * s.w();
    if plane == 0 {
        return Err(TensorError::EmptyReduction(s));
    }
    let out = Shape::new(s.n(), s.c(), 1, 1);
    let mut data = vec![T::zero(); out.numel()];
    let mut argmax = Vec::new();
    for (nc, chunk) in x.data().chunks(plane).enumerate() {
        match mode {
            PoolMode::Avg => {
                let mut acc = T::zero();
                for &v in chunk {
                    acc = acc + v;
                }
                data[nc] = acc / T::from_f64c(plane as f64);
            }
            PoolMode::Max => {
                let mut best = chunk[0];
                let mut best_i = 0;
                for (i, &v) in chunk.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                data[nc] = best;
                argmax.push(best_i);
            }
        }
    }
    Ok(record(&[x], out, data, || {
        Box::new(ReduceSpatialBackward::<T> {
            x: x.node().unwrap(),
            x_shape: s,
            mode,
            argmax,
            _marker: std::marker::PhantomData,
        })
    }))
}

struct ReduceChannelsBackward<T: Scalar> {
    x: NodeId,
    x_shape: Shape,
    mode: PoolMode,
    argmax: Vec<usize>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Backward<T> for ReduceChannelsBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let s = self.x_shape;
        let plane = s.h() * s.w();
        let gx = sink.accum(self.x);
        match self.mode {
            PoolMode::Avg => {
                let inv = T::one() / T::from_f64c(s.c() as f64);
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        for p in 0..plane {
                            let idx = (n * s.c() + c) * plane + p;
                            gx[idx] = gx[idx] + go[n * plane + p] * inv;
                        }
                    }
                }
            }
            PoolMode::Max => {
                for n in 0..s.n() {
                    for p in 0..plane {
                        let c = self.argmax[n * plane + p];
                        let idx = (n * s.c() + c) * plane + p;
                        gx[idx] = gx[idx] + go[n * plane + p];
                    }
                }
            }
        }
    }
}

/// Per-pixel reduction across channels: `NxCxHxW -> Nx1xHxW`.
pub fn reduce_channels<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> TensorResult<Tensor<T>> {
    let s = x.shape();
    if s.c() == 0 {
        return Err(TensorError::EmptyReduction(s));
    }
    let plane = s.h() * s.w();
    let out = Shape::new(s.n(), 1, s.h(), s.w());
    let xd = x.data();
    let mut data = vec![T::zero(); out.numel()];
    let mut argmax = Vec::new();
    for n in 0..s.n() {
        for p in 0..plane {
            match mode {
                PoolMode::Avg => {
                    let mut acc = T::zero();
                    for c in 0..s.c() {
                        acc = acc + xd[(n * s.c() + c) * plane + p];
                    }
                    data[n * plane + p] = acc / T::from_f64c(s.c() as f64);
                }
                PoolMode::Max => {
                    let mut best = xd[n * s.c() * plane + p];
                    let mut best_c = 0;
                    for c in 1..s.c() {
                        let v = xd[(n * s.c() + c) * plane + p];
                        if v > best {
                            best = v;
                            best_c = c;
                        }
                    }
                    data[n * plane + p] = best;
                    argmax.push(best_c);
                }
            }
        }
    }
    Ok(record(&[x], out, data, || {
        Box::new(ReduceChannelsBackward::<T> {
            x: x.node().unwrap(),
            x_shape: s,
            mode,
            argmax,
            _marker: std::marker::PhantomData,
        })
    }))
}

// ---------------------------------------------------------------------------
// upsampling
// ---------------------------------------------------------------------------

struct UpsampleBackward {
    x: NodeId,
    x_shape: Shape,
    factor: usize,
}

impl<T: Scalar> Backward<T> for UpsampleBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let s = self.x_shape;
        let f = self.factor;
        let (oh, ow) = (s.h() * f, s.w() * f);
        let gx = sink.accum(self.x);
        for nc in 0..s.n() * s.c() {
            let go_plane = &go[nc * oh * ow..(nc + 1) * oh * ow];
            let gx_plane = &mut gx[nc * s.h() * s.w()..(nc + 1) * s.h() * s.w()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let idx = (oy / f) * s.w() + ox / f;
                    gx_plane[idx] = gx_plane[idx] + go_plane[oy * ow + ox];
                }
            }
        }
    }
}

/// Replicates each pixel `factor` times along both spatial extents.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> TensorResult<Tensor<T>> {
    if factor == 0 {
        return Err(TensorError::UpsampleFactor);
    }
    let s = x.shape();
    let out = Shape::new(s.n(), s.c(), s.h() * factor, s.w() * factor);
    let xd = x.data();
    let mut data = vec![T::zero(); out.numel()];
    let (oh, ow) = (out.h(), out.w());
    for nc in 0..s.n() * s.c() {
        let src = &xd[nc * s.h() * s.w()..(nc + 1) * s.h() * s.w()];
        let dst = &mut data[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / factor) * s.w() + ox / factor];
            }
        }
    }
    Ok(record(&[x], out, data, || {
        Box::new(UpsampleBackward {
            x: x.node().unwrap(),
            x_shape: s,
            factor,
        })
    }))
}
