//! Non-overlapping patch partitioning for the patchwise attention layer.
//!
//! `patch_partition` tiles an `NxCxHxW` map into `MxM` windows and flattens
//! each into an `M^2 x C` matrix; `patch_merge` is its exact inverse. Pixel
//! `(i, j)` of batch item `n` lands in patch
//! `n * (H/M) * (W/M) + (i/M) * (W/M) + (j/M)` at row `(i % M) * M + (j % M)`,
//! column `c`.

use crate::error::{TensorError, TensorResult};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{record, Backward, GradSink, NodeId};
use crate::tensor::Tensor;

/// Flat index pairs `(feature_map_idx, patch_matrix_idx)` in feature-map
/// iteration order. Both directions of the permutation use this map.
fn index_pairs(s: Shape, m: usize, mut f: impl FnMut(usize, usize)) {
    let (n_ext, c_ext, h, w) = (s.n(), s.c(), s.h(), s.w());
    let (ph, pw) = (h / m, w / m);
    let patches_per_item = ph * pw;
    let m2 = m * m;
    for n in 0..n_ext {
        for c in 0..c_ext {
            for i in 0..h {
                for j in 0..w {
                    let p = n * patches_per_item + (i / m) * pw + j / m;
                    let row = (i % m) * m + (j % m);
                    let map_idx = s.index(n, c, i, j);
                    let patch_idx = (p * m2 + row) * c_ext + c;
                    f(map_idx, patch_idx);
                }
            }
        }
    }
}

struct PartitionBackward {
    x: NodeId,
    x_shape: Shape,
    m: usize,
}

impl<T: Scalar> Backward<T> for PartitionBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let gx = sink.accum(self.x);
        index_pairs(self.x_shape, self.m, |map_idx, patch_idx| {
            gx[map_idx] = gx[map_idx] + go[patch_idx];
        });
    }
}

/// `NxCxHxW -> (N * (H/M) * (W/M)) x 1 x M^2 x C`; requires `M | H` and `M | W`.
pub fn patch_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> TensorResult<Tensor<T>> {
    let s = x.shape();
    if m == 0 || s.h() % m != 0 || s.w() % m != 0 {
        return Err(TensorError::PatchSize { input: s, m });
    }
    let patches = s.n() * (s.h() / m) * (s.w() / m);
    let out = Shape::new(patches, 1, m * m, s.c());
    let xd = x.data();
    let mut data = vec![T::zero(); out.numel()];
    index_pairs(s, m, |map_idx, patch_idx| data[patch_idx] = xd[map_idx]);
    Ok(record(&[x], out, data, || {
        Box::new(PartitionBackward {
            x: x.node().unwrap(),
            x_shape: s,
            m,
        })
    }))
}

struct MergeBackward {
    x: NodeId,
    map_shape: Shape,
    m: usize,
}

impl<T: Scalar> Backward<T> for MergeBackward {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let gx = sink.accum(self.x);
        index_pairs(self.map_shape, self.m, |map_idx, patch_idx| {
            gx[patch_idx] = gx[patch_idx] + go[map_idx];
        });
    }
}

/// Inverse of [`patch_partition`]: rebuilds the `NxCxHxW` map.
pub fn patch_merge<T: Scalar>(
    patches: &Tensor<T>,
    map_shape: impl Into<Shape>,
    m: usize,
) -> TensorResult<Tensor<T>> {
    let map_shape = map_shape.into();
    let s = patches.shape();
    if m == 0 || map_shape.h() % m != 0 || map_shape.w() % m != 0 {
        return Err(TensorError::PatchSize {
            input: map_shape,
            m,
        });
    }
    let expect = Shape::new(
        map_shape.n() * (map_shape.h() / m) * (map_shape.w() / m),
        1,
        m * m,
        map_shape.c(),
    );
    if s != expect {
        return Err(TensorError::ShapeMismatch {
            op: "patch_merge",
            lhs: s,
            rhs: expect,
        });
    }
    let pd = patches.data();
    let mut data = vec![T::zero(); map_shape.numel()];
    index_pairs(map_shape, m, |map_idx, patch_idx| data[map_idx] = pd[patch_idx]);
    Ok(record(&[patches], map_shape, data, || {
        Box::new(MergeBackward {
            x: patches.node().unwrap(),
            map_shape,
            m,
        })
    }))
}
