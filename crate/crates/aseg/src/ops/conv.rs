//! 2-D cross-correlation via im2col and matrix products.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{TensorError, TensorResult};
use crate::linalg::{gemm_nn, transpose};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{axpy_one, record, Backward, GradSink, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
}

fn out_extent(extent: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let eff = dilation.checked_mul(k - 1)? + 1;
    let padded = extent + 2 * padding;
    if padded < eff {
        return None;
    }
    let num = padded - eff;
    if num % stride != 0 {
        return None;
    }
    Some(num / stride + 1)
}

/// Unfolds one batch item into `col[ckk][oh*ow]`; `col` must be zeroed.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let ohw = g.ohw();
    for ic in 0..g.cin {
        let plane = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for r in 0..g.kh {
            for s in 0..g.kw {
                let row = &mut col[((ic * g.kh + r) * g.kw + s) * ohw..][..ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + r * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    if g.stride == 1 {
                        let off = s as isize * g.dilation as isize - g.padding as isize;
                        // valid ox range: 0 <= ox + off < w
                        let lo = (-off).max(0) as usize;
                        let hi = (g.w as isize - off).clamp(0, g.ow as isize) as usize;
                        if lo < hi {
                            let start = (lo as isize + off) as usize;
                            let src = &plane[iy * g.w + start..][..hi - lo];
                            row[oy * g.ow + lo..oy * g.ow + hi].copy_from_slice(src);
                        }
                    } else {
                        for ox in 0..g.ow {
                            let ix =
                                (ox * g.stride + s * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                row[oy * g.ow + ox] = plane[iy * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds `col` gradients back onto one batch item (scatter-add).
fn col2im<T: Scalar>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let ohw = g.ohw();
    for ic in 0..g.cin {
        let plane = &mut dx[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for r in 0..g.kh {
            for s in 0..g.kw {
                let row = &col[((ic * g.kh + r) * g.kw + s) * ohw..][..ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + r * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    if g.stride == 1 {
                        let off = s as isize * g.dilation as isize - g.padding as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = (g.w as isize - off).clamp(0, g.ow as isize) as usize;
                        if lo < hi {
                            let start = (lo as isize + off) as usize;
                            let dst = &mut plane[iy * g.w + start..][..hi - lo];
                            axpy_one(dst, &row[oy * g.ow + lo..oy * g.ow + hi]);
                        }
                    } else {
                        for ox in 0..g.ow {
                            let ix =
                                (ox * g.stride + s * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy * g.w + ix as usize] =
                                    plane[iy * g.w + ix as usize] + row[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvBackward<T: Scalar> {
    x: Option<NodeId>,
    w: Option<NodeId>,
    b: Option<NodeId>,
    x_data: Arc<Vec<T>>,
    w_data: Arc<Vec<T>>,
    g: Geometry,
}

impl<T: Scalar> Backward<T> for ConvBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let g = &self.g;
        let (ckk, ohw) = (g.ckk(), g.ohw());
        let item_in = g.cin * g.h * g.w;
        let item_out = g.cout * ohw;

        if let Some(id) = self.x {
            let wt = transpose(g.cout, ckk, &self.w_data);
            let gx = sink.accum(id);
            gx.par_chunks_mut(item_in)
                .zip(go.par_chunks(item_out))
                .for_each(|(dx, go_n)| {
                    let mut dcol = vec![T::zero(); ckk * ohw];
                    gemm_nn(ckk, g.cout, ohw, &wt, go_n, &mut dcol);
                    col2im(&dcol, g, dx);
                });
        }

        if let Some(id) = self.w {
            // dW^T = col · go^T accumulated over the batch, then transposed;
            // per-item partials are reduced in batch order for determinism.
            let partials: Vec<Vec<T>> = self
                .x_data
                .par_chunks(item_in)
                .zip(go.par_chunks(item_out))
                .map(|(x_n, go_n)| {
                    let mut col = vec![T::zero(); ckk * ohw];
                    im2col(x_n, g, &mut col);
                    let got = transpose(g.cout, ohw, go_n);
                    let mut dwt = vec![T::zero(); ckk * g.cout];
                    gemm_nn(ckk, ohw, g.cout, &col, &got, &mut dwt);
                    dwt
                })
                .collect();
            let mut dwt = vec![T::zero(); ckk * g.cout];
            for p in &partials {
                axpy_one(&mut dwt, p);
            }
            axpy_one(sink.accum(id), &transpose(ckk, g.cout, &dwt));
        }

        if let Some(id) = self.b {
            let gb = sink.accum(id);
            for go_n in go.chunks(item_out) {
                for (c, gc) in gb.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for &v in &go_n[c * ohw..(c + 1) * ohw] {
                        acc = acc + v;
                    }
                    *gc = *gc + acc;
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x` (`NxC_inxHxW`) with `kernel`
/// (`C_outxC_inxkHxkW`), plus an optional per-channel bias (`1xC_outx1x1`).
///
/// Output extents must come out integral: `(H + 2p - d(kH-1) - 1) / stride`
/// must divide exactly, otherwise the geometry is rejected.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> TensorResult<Tensor<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.c() != ks.c() {
        return Err(TensorError::ChannelMismatch {
            input: xs,
            kernel: ks,
            input_c: xs.c(),
            kernel_c: ks.c(),
        });
    }
    if stride == 0 || dilation == 0 {
        return Err(TensorError::ConvGeometry {
            input: xs,
            kernel: ks,
            stride,
            padding,
            dilation,
        });
    }
    let (oh, ow) = match (
        out_extent(xs.h(), ks.h(), stride, padding, dilation),
        out_extent(xs.w(), ks.w(), stride, padding, dilation),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(TensorError::ConvGeometry {
                input: xs,
                kernel: ks,
                stride,
                padding,
                dilation,
            })
        }
    };
    if let Some(b) = bias {
        let expect = Shape::new(1, ks.n(), 1, 1);
        if b.shape() != expect {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: b.shape(),
                rhs: expect,
            });
        }
    }

    let g = Geometry {
        cin: xs.c(),
        h: xs.h(),
        w: xs.w(),
        cout: ks.n(),
        kh: ks.h(),
        kw: ks.w(),
        stride,
        padding,
        dilation,
        oh,
        ow,
    };
    let out_shape = Shape::new(xs.n(), g.cout, oh, ow);
    let (ckk, ohw) = (g.ckk(), g.ohw());
    let item_in = g.cin * g.h * g.w;
    let item_out = g.cout * ohw;

    let mut data = vec![T::zero(); out_shape.numel()];
    let w_data: &[T] = kernel.data();
    let bias_data: Option<&[T]> = bias.map(|b| b.data());
    data.par_chunks_mut(item_out)
        .zip(x.data().par_chunks(item_in))
        .for_each(|(y_n, x_n)| {
            let mut col = vec![T::zero(); ckk * ohw];
            im2col(x_n, &g, &mut col);
            gemm_nn(g.cout, ckk, ohw, w_data, &col, y_n);
            if let Some(bd) = bias_data {
                for (c, &bc) in bd.iter().enumerate() {
                    for v in &mut y_n[c * ohw..(c + 1) * ohw] {
                        *v = *v + bc;
                    }
                }
            }
        });

    let mut inputs = vec![x, kernel];
    if let Some(b) = bias {
        inputs.push(b);
    }
    Ok(record(&inputs, out_shape, data, || {
        Box::new(ConvBackward {
            x: x.node(),
            w: kernel.node(),
            b: bias.and_then(|b| b.node()),
            x_data: x.data_arc(),
            w_data: kernel.data_arc(),
            g,
        })
    }))
}
