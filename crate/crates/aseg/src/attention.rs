//! Skip-connection attention: channel/spatial gating and the hybrid
//! sparse/dense patch self-attention layer.
//!
//! The channel-spatial block (CBAM) gates a feature map twice: first by a
//! per-channel weight derived from global average- and max-pooled
//! descriptors pushed through a shared two-layer MLP, then by a per-pixel
//! weight derived from channelwise average/max maps convolved with a dilated
//! 7x7 kernel. The hybrid layer (HAL) tiles the map into MxM patches and
//! runs single-head self-attention per patch with two branches sharing the
//! same scores: a dense branch (DAL) normalizes scores with a row softmax, a
//! sparse branch (SAL) squares the positive part and zeroes everything
//! nonpositive. The branches are blended by a softmax-normalized pair of
//! learned weights.

use rand::Rng;

use crate::error::{TensorError, TensorResult};
use crate::ops::{self, PoolMode};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Dilation of the spatial-attention kernel; padding keeps SAME extents.
pub const SPATIAL_KERNEL: usize = 7;
pub const SPATIAL_DILATION: usize = 4;
pub const SPATIAL_PADDING: usize = SPATIAL_DILATION * (SPATIAL_KERNEL - 1) / 2;

/// How the two attention blocks combine on a skip connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    /// `hal(cbam(f))` — the default.
    Series,
    /// `cbam(f) + hal(f)`.
    ParallelSum,
}

impl std::str::FromStr for SkipMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "series" => Ok(SkipMode::Series),
            "parallel_sum" => Ok(SkipMode::ParallelSum),
            other => Err(format!(
                "unknown skip mode `{other}` (expected `series` or `parallel_sum`)"
            )),
        }
    }
}

impl std::fmt::Display for SkipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SkipMode::Series => "series",
            SkipMode::ParallelSum => "parallel_sum",
        })
    }
}

/// Learnable weights of one channel-spatial attention block.
#[derive(Clone)]
pub struct CbamParams<T: Scalar> {
    /// First MLP layer, `1x1x(C/r)xC`; shared between the avg and max paths.
    pub mlp_w1: Tensor<T>,
    /// Second MLP layer, `1x1xCx(C/r)`.
    pub mlp_w2: Tensor<T>,
    /// Dilated spatial kernel, `1x2x7x7`: consumes the stacked avg/max maps.
    pub spatial_kernel: Tensor<T>,
    pub reduction: usize,
}

impl<T: Scalar> CbamParams<T> {
    /// Fan-in-scaled uniform initialization. The reduction ratio must divide
    /// the channel count.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self, String> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(format!(
                "reduction ratio {reduction} does not divide {channels} channels"
            ));
        }
        let hidden = channels / reduction;
        Ok(CbamParams {
            mlp_w1: Tensor::uniform(
                Shape::new(1, 1, hidden, channels),
                1.0 / (channels as f64).sqrt(),
                rng,
            ),
            mlp_w2: Tensor::uniform(
                Shape::new(1, 1, channels, hidden),
                1.0 / (hidden as f64).sqrt(),
                rng,
            ),
            spatial_kernel: Tensor::uniform(
                Shape::new(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL),
                1.0 / (2.0 * (SPATIAL_KERNEL * SPATIAL_KERNEL) as f64).sqrt(),
                rng,
            ),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.mlp_w1.shape().w()
    }
}

/// Learnable weights of one hybrid attention layer.
#[derive(Clone)]
pub struct HalParams<T: Scalar> {
    /// Query/key/value projections, `1x1xCxd`, shared among all patches.
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// Output projection back to the channel count, `1x1xdxC`.
    pub w_out: Tensor<T>,
    /// Relative position bias table, `1x1xM^2xM^2`, added to every patch's
    /// scores.
    pub bias_table: Tensor<T>,
    /// Two logits; `softmax` of these yields the branch weights `omega`.
    pub omega_logits: Tensor<T>,
    /// Patch edge M.
    pub patch: usize,
    /// Projection width d.
    pub dim: usize,
}

impl<T: Scalar> HalParams<T> {
    pub fn init(channels: usize, dim: usize, patch: usize, rng: &mut impl Rng) -> Self {
        let m2 = patch * patch;
        HalParams {
            w_q: Tensor::uniform(
                Shape::new(1, 1, channels, dim),
                1.0 / (channels as f64).sqrt(),
                rng,
            ),
            w_k: Tensor::uniform(
                Shape::new(1, 1, channels, dim),
                1.0 / (channels as f64).sqrt(),
                rng,
            ),
            w_v: Tensor::uniform(
                Shape::new(1, 1, channels, dim),
                1.0 / (channels as f64).sqrt(),
                rng,
            ),
            w_out: Tensor::uniform(
                Shape::new(1, 1, dim, channels),
                1.0 / (dim as f64).sqrt(),
                rng,
            ),
            bias_table: Tensor::zeros(Shape::new(1, 1, m2, m2)),
            omega_logits: Tensor::zeros(Shape::new(1, 1, 1, 2)),
            patch,
            dim,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape().h()
    }

    /// Branch weights `(omega_1, omega_2)` as scalar tensors; they are
    /// nonnegative and sum to one for any logits.
    pub fn omega(&self) -> TensorResult<(Tensor<T>, Tensor<T>)> {
        let w = self.omega_logits.softmax_last_dim()?;
        Ok((ops::slice_w(&w, 0)?, ops::slice_w(&w, 1)?))
    }
}

/// Attention internals captured for heatmap export. Maps are detached
/// `Nx1xHxW` tensors.
#[derive(Default)]
pub struct LevelTrace<T: Scalar> {
    /// Spatial sigmoid gate of the CBAM block.
    pub cbam_gate: Option<Tensor<T>>,
    /// Attention mass received per pixel under the dense branch.
    pub dal_map: Option<Tensor<T>>,
    /// Attention mass received per pixel under the sparse branch.
    pub sal_map: Option<Tensor<T>>,
}

// ---------------------------------------------------------------------------
// CBAM
// ---------------------------------------------------------------------------

/// Shared two-layer MLP over `1x1xNxC` descriptors.
fn cbam_mlp<T: Scalar>(desc: &Tensor<T>, p: &CbamParams<T>) -> TensorResult<Tensor<T>> {
    let hidden = ops::matmul_nt(desc, &p.mlp_w1)?.relu();
    ops::matmul_nt(&hidden, &p.mlp_w2)
}

/// Channel gate: `sigmoid(MLP(avg) + MLP(max))` broadcast over `HxW`.
pub fn channel_attention<T: Scalar>(
    f: &Tensor<T>,
    p: &CbamParams<T>,
) -> TensorResult<Tensor<T>> {
    let s = f.shape();
    let desc_shape = Shape::new(1, 1, s.n(), s.c());
    let ap = ops::reduce_spatial(f, PoolMode::Avg)?.reshape(desc_shape)?;
    let mp = ops::reduce_spatial(f, PoolMode::Max)?.reshape(desc_shape)?;
    let gate = ops::add(&cbam_mlp(&ap, p)?, &cbam_mlp(&mp, p)?)?
        .sigmoid()
        .reshape(Shape::new(s.n(), s.c(), 1, 1))?;
    ops::mul_broadcast(f, &gate)
}

/// Spatial gate: dilated 7x7 convolution over the stacked channel-avg and
/// channel-max maps, kept at SAME extents.
pub fn spatial_attention<T: Scalar>(
    f_c: &Tensor<T>,
    p: &CbamParams<T>,
    mut trace: Option<&mut LevelTrace<T>>,
) -> TensorResult<Tensor<T>> {
    let am = ops::reduce_channels(f_c, PoolMode::Avg)?;
    let mm = ops::reduce_channels(f_c, PoolMode::Max)?;
    let stacked = ops::concat_channels(&am, &mm)?;
    let gate = ops::conv2d(
        &stacked,
        &p.spatial_kernel,
        None,
        1,
        SPATIAL_PADDING,
        SPATIAL_DILATION,
    )?
    .sigmoid();
    if let Some(t) = trace.as_deref_mut() {
        t.cbam_gate = Some(gate.detach());
    }
    ops::mul_broadcast(f_c, &gate)
}

/// Channel then spatial attention.
pub fn cbam<T: Scalar>(
    f: &Tensor<T>,
    p: &CbamParams<T>,
    trace: Option<&mut LevelTrace<T>>,
) -> TensorResult<Tensor<T>> {
    spatial_attention(&channel_attention(f, p)?, p, trace)
}

// ---------------------------------------------------------------------------
// HAL
// ---------------------------------------------------------------------------

/// Scaled query-key scores with the position bias: `Q K^T / sqrt(d) + B`.
///
/// `q`, `k` are batched per patch (`Bx1xM^2xd`); `bias` is shared
/// (`1x1xM^2xM^2`).
pub fn attention_scores<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    bias: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    let d = q.shape().w();
    let scaled = ops::bmm_nt(q, k)?.scale(T::one() / T::from_f64c((d as f64).sqrt()));
    ops::add_broadcast(&scaled, bias)
}

/// Dense branch: row softmax of the scores. Rows sum to one.
pub fn dal<T: Scalar>(scores: &Tensor<T>) -> TensorResult<Tensor<T>> {
    scores.softmax_last_dim()
}

/// Sparse branch: squared positive part of the scores. Exactly zero where a
/// score is nonpositive, so negatively correlated query-key pairs drop out.
pub fn sal<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    scores.relu_squared()
}

/// Per-pixel received attention: column sums of each patch's attention
/// matrix scattered back onto the feature map.
fn received_map<T: Scalar>(att: &Tensor<T>, map_shape: Shape, m: usize) -> Tensor<T> {
    let s = att.shape(); // [P, 1, m2, m2]
    let m2 = s.h();
    let mut sums = vec![T::zero(); s.n() * m2];
    for p in 0..s.n() {
        let block = &att.data()[p * m2 * m2..(p + 1) * m2 * m2];
        for row in block.chunks(m2) {
            for (j, &v) in row.iter().enumerate() {
                sums[p * m2 + j] = sums[p * m2 + j] + v;
            }
        }
    }
    let patches = Tensor::from_vec(Shape::new(s.n(), 1, m2, 1), sums);
    let mono = Shape::new(map_shape.n(), 1, map_shape.h(), map_shape.w());
    ops::patch_merge(&patches, mono, m).expect("received_map shape")
}

/// Hybrid attention layer over non-overlapping `MxM` patches.
///
/// Per patch: project rows to Q/K/V, score them, blend the dense and sparse
/// branches with the normalized weights, apply to V, project back to the
/// channel count and reassemble the map. Shape-preserving.
pub fn hal<T: Scalar>(
    f: &Tensor<T>,
    p: &HalParams<T>,
    mut trace: Option<&mut LevelTrace<T>>,
) -> TensorResult<Tensor<T>> {
    let s = f.shape();
    let c = s.c();
    if c != p.channels() {
        return Err(TensorError::ShapeMismatch {
            op: "hal",
            lhs: s,
            rhs: p.w_q.shape(),
        });
    }
    let m = p.patch;
    let m2 = m * m;
    let patches = ops::patch_partition(f, m)?; // [P, 1, m2, C]
    let p_count = patches.shape().n();
    let flat = patches.reshape(Shape::new(1, 1, p_count * m2, c))?;

    let batched = |x: Tensor<T>| x.reshape(Shape::new(p_count, 1, m2, p.dim));
    let q = batched(flat.matmul(&p.w_q)?)?;
    let k = batched(flat.matmul(&p.w_k)?)?;
    let v = batched(flat.matmul(&p.w_v)?)?;

    let scores = attention_scores(&q, &k, &p.bias_table)?;
    let dense = dal(&scores)?;
    let sparse = sal(&scores);
    if let Some(t) = trace.as_deref_mut() {
        t.dal_map = Some(received_map(&dense, s, m));
        t.sal_map = Some(received_map(&sparse, s, m));
    }

    let (w1, w2) = p.omega()?;
    let blended = ops::add(
        &ops::mul_broadcast(&dense, &w1)?,
        &ops::mul_broadcast(&sparse, &w2)?,
    )?;

    let out = ops::bmm_nn(&blended, &v)?; // [P, 1, m2, d]
    let out_flat = out.reshape(Shape::new(1, 1, p_count * m2, p.dim))?;
    let projected = out_flat.matmul(&p.w_out)?; // [.., m2*P, C]
    let back = projected.reshape(Shape::new(p_count, 1, m2, c))?;
    ops::patch_merge(&back, s, m)
}

/// Applies the configured combination of the two blocks to a skip feature.
pub fn skip_refine<T: Scalar>(
    f: &Tensor<T>,
    cbam_p: &CbamParams<T>,
    hal_p: &HalParams<T>,
    mode: SkipMode,
) -> TensorResult<Tensor<T>> {
    match mode {
        SkipMode::Series => hal(&cbam(f, cbam_p, None)?, hal_p, None),
        SkipMode::ParallelSum => ops::add(&cbam(f, cbam_p, None)?, &hal(f, hal_p, None)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_must_divide_channels() {
        let mut rng = rand::rngs::mock::StepRng::new(1, 1);
        assert!(CbamParams::<f64>::init(6, 4, &mut rng).is_err());
        assert!(CbamParams::<f64>::init(6, 2, &mut rng).is_ok());
    }

    #[test]
    fn spatial_padding_keeps_same_extents() {
        // effective kernel = 4 * 6 + 1 = 25, so padding 12 preserves size
        assert_eq!(SPATIAL_PADDING, 12);
    }
}
