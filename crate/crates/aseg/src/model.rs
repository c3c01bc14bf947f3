//! The four-level residual encoder/decoder with attention-refined skips.
//!
//! `encode` halves the spatial extents per level with stride-2 max pooling
//! while doubling channels; `decode` mirrors it with nearest-neighbor
//! upsampling, concatenating the refined skip of each level before a
//! residual block. A final 1x1 convolution produces single-channel logits;
//! `forward` applies the sigmoid.

use std::collections::BTreeMap;


use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cbam, hal, CbamParams, HalParams, LevelTrace, SkipMode,
};
use crate::error::{TensorError, TensorResult};
use crate::ops::{self, PoolMode};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Attention settings, applied per skip connection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnConfig {
    pub cbam: bool,
    pub hal: bool,
    /// Per-level HAL switches; `None` applies it on every level.
    pub hal_levels: Option<Vec<bool>>,
    pub skip_mode: SkipMode,
    /// Patch edge M.
    pub patch: usize,
    /// CBAM reduction ratio r.
    pub reduction: usize,
    /// Projection width d; 0 means "match the channel count of the level".
    pub dim: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            cbam: true,
            hal: true,
            hal_levels: None,
            skip_mode: SkipMode::Series,
            patch: 4,
            reduction: 2,
            dim: 0,
        }
    }
}

/// Architecture hyperparameters; every parameter shape derives from this.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub input_hw: (usize, usize),
    /// With `false`, blocks drop the residual shortcut (plain U-Net style).
    pub residual: bool,
    pub attn: AttnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            base_channels: 16,
            input_hw: (128, 128),
            residual: true,
            attn: AttnConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("decoder level {level}: {source}")]
    Decode {
        level: usize,
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ModelConfig {
    /// Channel count of encoder level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial edge of the skip at level `l` for a given input edge.
    pub fn skip_edge(&self, input_edge: usize, level: usize) -> usize {
        input_edge >> level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.levels
    }

    /// Channel count entering the decoder block of level `l` after
    /// concatenation: upsampled decoder features plus the refined skip.
    pub fn decoder_concat_channels(&self, level: usize) -> usize {
        self.channels(level + 1) + self.channels(level)
    }

    pub fn hal_enabled(&self, level: usize) -> bool {
        self.attn.hal
            && self
                .attn
                .hal_levels
                .as_ref()
                .map_or(true, |mask| mask.get(level).copied().unwrap_or(false))
    }

    pub fn hal_dim(&self, level: usize) -> usize {
        if self.attn.dim == 0 {
            self.channels(level)
        } else {
            self.attn.dim
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.levels == 0 {
            return Err(ModelError::Config("levels must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(ModelError::Config("base_channels must be positive".into()));
        }
        let (h, w) = self.input_hw;
        let div = 1usize << self.levels;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(ModelError::Config(format!(
                "input {h}x{w} not divisible by 2^levels = {div}"
            )));
        }
        for level in 0..self.levels {
            let c = self.channels(level);
            if self.attn.cbam && c % self.attn.reduction != 0 {
                return Err(ModelError::Config(format!(
                    "channels {c} at level {level} not divisible by reduction {}",
                    self.attn.reduction
                )));
            }
            if self.hal_enabled(level) {
                let edge_h = self.skip_edge(h, level);
                let edge_w = self.skip_edge(w, level);
                if edge_h % self.attn.patch != 0 || edge_w % self.attn.patch != 0 {
                    return Err(ModelError::Config(format!(
                        "skip extents {edge_h}x{edge_w} at level {level} not divisible by patch {}",
                        self.attn.patch
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Scale/shift plus running statistics of one normalization layer. The
/// running statistics are state, not learnables: they receive no gradient
/// and update by moving average during training.
#[derive(Clone)]
pub struct BnParams<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BnParams<T> {
    fn init(channels: usize) -> Self {
        BnParams {
            scale: Tensor::full(Shape::new(1, channels, 1, 1), T::one()),
            shift: Tensor::zeros(Shape::new(1, channels, 1, 1)),
            running_mean: Tensor::zeros(Shape::new(1, channels, 1, 1)),
            running_var: Tensor::full(Shape::new(1, channels, 1, 1), T::one()),
        }
    }
}

/// Two 3x3 convolutions with normalization, plus an optional 1x1 projection
/// for the shortcut when channel counts differ.
#[derive(Clone)]
pub struct ResBlockParams<T: Scalar> {
    pub conv1: Tensor<T>,
    pub bn1: BnParams<T>,
    pub conv2: Tensor<T>,
    pub bn2: BnParams<T>,
    pub proj: Option<Tensor<T>>,
}

impl<T: Scalar> ResBlockParams<T> {
    fn init(in_ch: usize, out_ch: usize, residual: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan1 = (in_ch * 9) as f64;
        let fan2 = (out_ch * 9) as f64;
        ResBlockParams {
            conv1: Tensor::uniform(
                Shape::new(out_ch, in_ch, 3, 3),
                1.0 / fan1.sqrt(),
                rng,
            ),
            bn1: BnParams::init(out_ch),
            conv2: Tensor::uniform(
                Shape::new(out_ch, out_ch, 3, 3),
                1.0 / fan2.sqrt(),
                rng,
            ),
            bn2: BnParams::init(out_ch),
            proj: (residual && in_ch != out_ch).then(|| {
                Tensor::uniform(
                    Shape::new(out_ch, in_ch, 1, 1),
                    1.0 / (in_ch as f64).sqrt(),
                    rng,
                )
            }),
        }
    }
}

/// Attention blocks of one skip connection; absent blocks are skipped.
#[derive(Clone, Default)]
pub struct LevelAttn<T: Scalar> {
    pub cbam: Option<CbamParams<T>>,
    pub hal: Option<HalParams<T>>,
}

/// Every learnable tensor of the network plus normalization state, with a
/// stable naming scheme used by checkpoints, the optimizer and the gradient
/// checker.
#[derive(Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub encoder: Vec<ResBlockParams<T>>,
    pub bottleneck: ResBlockParams<T>,
    pub decoder: Vec<ResBlockParams<T>>,
    pub attn: Vec<LevelAttn<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut in_ch = 1;
        for level in 0..config.levels {
            let out = config.channels(level);
            encoder.push(ResBlockParams::init(in_ch, out, config.residual, rng));
            in_ch = out;
        }
        let bottleneck = ResBlockParams::init(
            in_ch,
            config.bottleneck_channels(),
            config.residual,
            rng,
        );
        let mut decoder = Vec::new();
        for level in 0..config.levels {
            decoder.push(ResBlockParams::init(
                config.decoder_concat_channels(level),
                config.channels(level),
                config.residual,
                rng,
            ));
        }
        let mut attn = Vec::new();
        for level in 0..config.levels {
            let c = config.channels(level);
            let cbam_p = if config.attn.cbam {
                Some(
                    CbamParams::init(c, config.attn.reduction, rng)
                        .map_err(ModelError::Config)?,
                )
            } else {
                None
            };
            let hal_p = if config.hal_enabled(level) {
                Some(HalParams::init(
                    c,
                    config.hal_dim(level),
                    config.attn.patch,
                    rng,
                ))
            } else {
                None
            };
            attn.push(LevelAttn {
                cbam: cbam_p,
                hal: hal_p,
            });
        }
        let base = config.base_channels;
        Ok(ModelParams {
            config: config.clone(),
            encoder,
            bottleneck,
            decoder,
            attn,
            head_w: Tensor::uniform(Shape::new(1, base, 1, 1), 1.0 / (base as f64).sqrt(), rng),
            head_b: Tensor::zeros(Shape::new(1, 1, 1, 1)),
        })
    }

    /// Visits every tensor with its canonical name, in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        fn block<T: Scalar>(
            prefix: &str,
            b: &ResBlockParams<T>,
            f: &mut impl FnMut(&str, &Tensor<T>),
        ) {
            f(&format!("{prefix}.conv1"), &b.conv1);
            f(&format!("{prefix}.bn1.scale"), &b.bn1.scale);
            f(&format!("{prefix}.bn1.shift"), &b.bn1.shift);
            f(&format!("{prefix}.bn1.mean"), &b.bn1.running_mean);
            f(&format!("{prefix}.bn1.var"), &b.bn1.running_var);
            f(&format!("{prefix}.conv2"), &b.conv2);
            f(&format!("{prefix}.bn2.scale"), &b.bn2.scale);
            f(&format!("{prefix}.bn2.shift"), &b.bn2.shift);
            f(&format!("{prefix}.bn2.mean"), &b.bn2.running_mean);
            f(&format!("{prefix}.bn2.var"), &b.bn2.running_var);
            if let Some(p) = &b.proj {
                f(&format!("{prefix}.proj"), p);
            }
        }
        for (i, b) in self.encoder.iter().enumerate() {
            block(&format!("enc{i}"), b, &mut f);
        }
        block("bottleneck", &self.bottleneck, &mut f);
        for (i, b) in self.decoder.iter().enumerate() {
            block(&format!("dec{i}"), b, &mut f);
        }
        for (i, a) in self.attn.iter().enumerate() {
            if let Some(c) = &a.cbam {
                f(&format!("attn{i}.cbam.w1"), &c.mlp_w1);
                f(&format!("attn{i}.cbam.w2"), &c.mlp_w2);
                f(&format!("attn{i}.cbam.spatial"), &c.spatial_kernel);
            }
            if let Some(h) = &a.hal {
                f(&format!("attn{i}.hal.wq"), &h.w_q);
                f(&format!("attn{i}.hal.wk"), &h.w_k);
                f(&format!("attn{i}.hal.wv"), &h.w_v);
                f(&format!("attn{i}.hal.wo"), &h.w_out);
                f(&format!("attn{i}.hal.bias"), &h.bias_table);
                f(&format!("attn{i}.hal.omega"), &h.omega_logits);
            }
        }
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    /// Mutable variant of [`ModelParams::visit`], same order and names.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        fn block<T: Scalar>(
            prefix: &str,
            b: &mut ResBlockParams<T>,
            f: &mut impl FnMut(&str, &mut Tensor<T>),
        ) {
            f(&format!("{prefix}.conv1"), &mut b.conv1);
            f(&format!("{prefix}.bn1.scale"), &mut b.bn1.scale);
            f(&format!("{prefix}.bn1.shift"), &mut b.bn1.shift);
            f(&format!("{prefix}.bn1.mean"), &mut b.bn1.running_mean);
            f(&format!("{prefix}.bn1.var"), &mut b.bn1.running_var);
            f(&format!("{prefix}.conv2"), &mut b.conv2);
            f(&format!("{prefix}.bn2.scale"), &mut b.bn2.scale);
            f(&format!("{prefix}.bn2.shift"), &mut b.bn2.shift);
            f(&format!("{prefix}.bn2.mean"), &mut b.bn2.running_mean);
            f(&format!("{prefix}.bn2.var"), &mut b.bn2.running_var);
            if let Some(p) = &mut b.proj {
                f(&format!("{prefix}.proj"), p);
            }
        }
        for (i, b) in self.encoder.iter_mut().enumerate() {
            block(&format!("enc{i}"), b, &mut f);
        }
        block("bottleneck", &mut self.bottleneck, &mut f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            block(&format!("dec{i}"), b, &mut f);
        }
        for (i, a) in self.attn.iter_mut().enumerate() {
            if let Some(c) = &mut a.cbam {
                f(&format!("attn{i}.cbam.w1"), &mut c.mlp_w1);
                f(&format!("attn{i}.cbam.w2"), &mut c.mlp_w2);
                f(&format!("attn{i}.cbam.spatial"), &mut c.spatial_kernel);
            }
            if let Some(h) = &mut a.hal {
                f(&format!("attn{i}.hal.wq"), &mut h.w_q);
                f(&format!("attn{i}.hal.wk"), &mut h.w_k);
                f(&format!("attn{i}.hal.wv"), &mut h.w_v);
                f(&format!("attn{i}.hal.wo"), &mut h.w_out);
                f(&format!("attn{i}.hal.bias"), &mut h.bias_table);
                f(&format!("attn{i}.hal.omega"), &mut h.omega_logits);
            }
        }
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }

    /// Whether a named tensor is trained (running statistics are not).
    pub fn is_learnable(name: &str) -> bool {
        !(name.ends_with(".mean") || name.ends_with(".var"))
    }

    /// Report group of a named tensor, for the gradient-check report.
    pub fn group_of(name: &str) -> &'static str {
        if name.contains(".bn") {
            "bn"
        } else if name.starts_with("enc") || name.starts_with("bottleneck") {
            "encoder"
        } else if name.starts_with("dec") {
            "decoder"
        } else if name.contains(".cbam.") {
            "cbam"
        } else if name.contains(".hal.") {
            "hal"
        } else {
            "output_head"
        }
    }

    /// Copy whose learnable tensors are registered on `tape`.
    pub fn mount(&self, tape: &Tape<T>) -> Self {
        let mut m = self.clone();
        m.visit_mut(|name, t| {
            if Self::is_learnable(name) {
                *t = tape.var(t);
            }
        });
        m
    }

    /// Gradients of every learnable tensor, keyed by name. Tensors the loss
    /// does not reach are absent.
    pub fn collect_grads(&self) -> BTreeMap<String, Vec<T>> {
        let mut grads = BTreeMap::new();
        self.visit(|name, t| {
            if let Some(g) = t.grad() {
                grads.insert(name.to_string(), g);
            }
        });
        grads
    }

    pub fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _| n += 1);
        n
    }

    pub fn num_elements(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    /// Folds batch-normalization statistics from a training step into the
    /// running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let momentum = T::from_f64c(BN_MOMENTUM);
        let keep = T::one() - momentum;
        let mut by_name: BTreeMap<String, &Vec<T>> = BTreeMap::new();
        for u in updates {
            by_name.insert(format!("{}.mean", u.layer), &u.mean);
            by_name.insert(format!("{}.var", u.layer), &u.var);
        }
        self.visit_mut(|name, t| {
            if let Some(src) = by_name.get(name) {
                for (r, &b) in t.data_mut().iter_mut().zip(src.iter()) {
                    *r = keep * *r + momentum * b;
                }
            }
        });
    }
}

/// Batch statistics of one normalization layer from a training-mode forward.
pub struct BnUpdate<T: Scalar> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

// ---------------------------------------------------------------------------
// forward graph
// ---------------------------------------------------------------------------

fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    bn: &BnParams<T>,
    layer: &str,
    training: bool,
    updates: &mut Vec<BnUpdate<T>>,
) -> TensorResult<Tensor<T>> {
    let eps = T::from_f64c(BN_EPS);
    if training {
        let (y, mean, var) = ops::batch_norm_train(x, &bn.scale, &bn.shift, eps)?;
        updates.push(BnUpdate {
            layer: layer.to_string(),
            mean,
            var,
        });
        Ok(y)
    } else {
        ops::batch_norm_eval(
            x,
            &bn.scale,
            &bn.shift,
            bn.running_mean.data(),
            bn.running_var.data(),
            eps,
        )
    }
}

/// Residual block: `relu(bn(conv(relu(bn(conv(f))))) + proj(f))`, where
/// `proj` is the identity when channel counts match. With `residual` off the
/// shortcut is dropped entirely.
pub fn res_block<T: Scalar>(
    f: &Tensor<T>,
    p: &ResBlockParams<T>,
    residual: bool,
    layer: &str,
    training: bool,
    updates: &mut Vec<BnUpdate<T>>,
) -> TensorResult<Tensor<T>> {
    let h = ops::conv2d(f, &p.conv1, None, 1, 1, 1)?;
    let h = bn_apply(&h, &p.bn1, &format!("{layer}.bn1"), training, updates)?.relu();
    let h = ops::conv2d(&h, &p.conv2, None, 1, 1, 1)?;
    let h = bn_apply(&h, &p.bn2, &format!("{layer}.bn2"), training, updates)?;
    if !residual {
        return Ok(h.relu());
    }
    let shortcut = match &p.proj {
        Some(w) => ops::conv2d(f, w, None, 1, 0, 1)?,
        None => f.clone(),
    };
    Ok(ops::add(&h, &shortcut)?.relu())
}

/// Encoder output: one skip feature per level plus the bottleneck.
pub fn encode<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    training: bool,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>), ModelError> {
    let cfg = &params.config;
    let s = image.shape();
    if s.c() != 1 {
        return Err(ModelError::Config(format!(
            "expected single-channel input, got {s}"
        )));
    }
    let div = 1usize << cfg.levels;
    if s.h() % div != 0 || s.w() % div != 0 {
        return Err(ModelError::Config(format!(
            "input {s} not divisible by 2^levels = {div}"
        )));
    }
    let mut skips = Vec::with_capacity(cfg.levels);
    let mut cur = image.clone();
    for (level, block) in params.encoder.iter().enumerate() {
        cur = res_block(
            &cur,
            block,
            cfg.residual,
            &format!("enc{level}"),
            training,
            updates,
        )?;
        skips.push(cur.clone());
        cur = ops::pool2d(&cur, PoolMode::Max, 2, 2)?;
    }
    let bottleneck = res_block(
        &cur,
        &params.bottleneck,
        cfg.residual,
        "bottleneck",
        training,
        updates,
    )?;
    Ok((skips, bottleneck))
}

/// Applies the configured attention blocks to the skip of one level.
fn refine_skip<T: Scalar>(
    params: &ModelParams<T>,
    level: usize,
    skip: &Tensor<T>,
    trace: Option<&mut LevelTrace<T>>,
) -> TensorResult<Tensor<T>> {
    let a = &params.attn[level];
    match params.config.attn.skip_mode {
        SkipMode::Series => {
            let mut cur = skip.clone();
            let mut trace = trace;
            if let Some(c) = &a.cbam {
                cur = cbam(&cur, c, trace.as_deref_mut())?;
            }
            if let Some(h) = &a.hal {
                cur = hal(&cur, h, trace)?;
            }
            Ok(cur)
        }
        SkipMode::ParallelSum => match (&a.cbam, &a.hal) {
            (Some(c), Some(h)) => {
                let mut trace = trace;
                let left = cbam(skip, c, trace.as_deref_mut())?;
                let right = hal(skip, h, trace)?;
                ops::add(&left, &right)
            }
            (Some(c), None) => cbam(skip, c, trace),
            (None, Some(h)) => hal(skip, h, trace),
            (None, None) => Ok(skip.clone()),
        },
    }
}

/// Decoder: upsample, fuse the refined skip by concatenation, run the
/// residual block of the level; final 1x1 convolution emits logits.
pub fn decode<T: Scalar>(
    params: &ModelParams<T>,
    bottleneck: &Tensor<T>,
    refined_skips: &[Tensor<T>],
    training: bool,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<Tensor<T>, ModelError> {
    let cfg = &params.config;
    let mut cur = bottleneck.clone();
    for level in (0..cfg.levels).rev() {
        let up = ops::upsample_nearest(&cur, 2).map_err(|source| ModelError::Decode {
            level,
            source,
        })?;
        let fused = ops::concat_channels(&up, &refined_skips[level]).map_err(|source| {
            ModelError::Decode { level, source }
        })?;
        cur = res_block(
            &fused,
            &params.decoder[level],
            cfg.residual,
            &format!("dec{level}"),
            training,
            updates,
        )
        .map_err(|source| ModelError::Decode { level, source })?;
    }
    Ok(ops::conv2d(&cur, &params.head_w, Some(&params.head_b), 1, 0, 1)?)
}

/// Full forward pass to logits. Training mode returns the batch statistics
/// of every normalization layer for the caller to commit.
pub fn forward_logits<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    training: bool,
) -> Result<(Tensor<T>, Vec<BnUpdate<T>>), ModelError> {
    let mut updates = Vec::new();
    let (skips, bottleneck) = encode(params, image, training, &mut updates)?;
    let refined: Vec<Tensor<T>> = skips
        .iter()
        .enumerate()
        .map(|(level, s)| refine_skip(params, level, s, None))
        .collect::<TensorResult<_>>()?;
    let logits = decode(params, &bottleneck, &refined, training, &mut updates)?;
    Ok((logits, updates))
}

/// Inference: probability mask in `(0, 1)`.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>, ModelError> {
    let (logits, _) = forward_logits(params, image, false)?;
    Ok(logits.sigmoid())
}

/// Inference with attention internals captured per level, for heatmaps.
pub fn forward_traced<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<LevelTrace<T>>), ModelError> {
    let mut updates = Vec::new();
    let (skips, bottleneck) = encode(params, image, false, &mut updates)?;
    let mut traces: Vec<LevelTrace<T>> = Vec::new();
    let mut refined = Vec::new();
    for (level, s) in skips.iter().enumerate() {
        let mut trace = LevelTrace::default();
        refined.push(refine_skip(params, level, s, Some(&mut trace))?);
        traces.push(trace);
    }
    let logits = decode(params, &bottleneck, &refined, false, &mut updates)?;
    Ok((logits.sigmoid(), traces))
}
