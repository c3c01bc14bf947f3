//! Adam optimization loop, dataset splitting and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::TensorError;
use crate::loss::{combined_loss_logits, FocalConfig, LossWeights};
use crate::metrics::{binarize, ConfusionCounts, MetricReport};
use crate::model::{forward_logits, ModelError, ModelParams};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Shape;

/// Fractions of the dataset assigned to each split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            test: 0.1,
            validation: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), String> {
        for f in [self.train, self.test, self.validation] {
            if !(0.0..=1.0).contains(&f) {
                return Err(format!("split fraction {f} outside [0, 1]"));
            }
        }
        let sum = self.train + self.test + self.validation;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("split fractions sum to {sum}, expected 1"));
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub focal: FocalConfig,
    pub seed: u64,
    pub split: SplitFractions,
    /// Binarization threshold for evaluation.
    pub threshold: f64,
    /// Stop after this many optimizer steps; 0 disables the cap.
    pub max_steps: usize,
    /// Stop once the logged validation Dice reaches this value.
    pub stop_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            learning_rate: 1e-5,
            batch_size: 4,
            weights: LossWeights::default(),
            focal: FocalConfig::default(),
            seed: 42,
            split: SplitFractions::default(),
            threshold: 0.5,
            max_steps: 0,
            stop_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err("learning rate must be finite and nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.threshold) || self.threshold <= 0.0 {
            return Err("threshold must lie in (0, 1)".into());
        }
        self.split.validate()?;
        self.weights.validate()?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step} (batch starting at sample index {batch_start})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch_start: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// dataset splitting
// ---------------------------------------------------------------------------

/// Index partition of a dataset: seeded shuffle, then contiguous blocks in
/// train/test/validation order. Sizes: the train block takes the ceiling of
/// its fraction, test the floor, validation the remainder (for n = 1629 at
/// 0.7/0.1/0.2 this yields 1141/162/326).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
}

pub fn split_dataset(
    n: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Split, TrainError> {
    fractions.validate().map_err(TrainError::Config)?;
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = ((n as f64 * fractions.train).ceil() as usize).min(n);
    let n_test = ((n as f64 * fractions.test).floor() as usize).min(n - n_train);
    let test_end = n_train + n_test;
    Ok(Split {
        train: indices[..n_train].to_vec(),
        test: indices[n_train..test_end].to_vec(),
        validation: indices[test_end..].to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates per parameter, plus the step counter.
#[derive(Clone)]
pub struct AdamState<T: Scalar> {
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            moments: BTreeMap::new(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &BTreeMap<String, Vec<T>>,
        lr: f64,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let (b1, b2) = (T::from_f64c(self.beta1), T::from_f64c(self.beta2));
        let eps = T::from_f64c(self.eps);
        let lr = T::from_f64c(lr);
        let corr1 = T::one() - T::from_f64c(self.beta1.powi(self.t as i32));
        let corr2 = T::one() - T::from_f64c(self.beta2.powi(self.t as i32));
        let mut shape_error: Option<String> = None;
        params.visit_mut(|name, tensor| {
            let Some(g) = grads.get(name) else {
                return;
            };
            if g.len() != tensor.numel() {
                shape_error = Some(format!(
                    "gradient of {name} has {} elements, parameter has {}",
                    g.len(),
                    tensor.numel()
                ));
                return;
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let data = tensor.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match shape_error {
            Some(msg) => Err(TrainError::Config(msg)),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// batching and evaluation
// ---------------------------------------------------------------------------

/// Stacks dataset samples into image and mask tensors (`Bx1xHxW`).
pub fn batch_tensors<T: Scalar>(dataset: &Dataset, indices: &[usize]) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (dataset.h, dataset.w);
    let shape = Shape::new(indices.len(), 1, h, w);
    let mut images = Vec::with_capacity(shape.numel());
    let mut masks = Vec::with_capacity(shape.numel());
    for &i in indices {
        let s = &dataset.samples[i];
        images.extend(s.image.iter().map(|&v| T::from_f64c(f64::from(v))));
        masks.extend(s.mask.iter().map(|&m| T::from_f64c(f64::from(m))));
    }
    (Tensor::from_vec(shape, images), Tensor::from_vec(shape, masks))
}

/// Forward-evaluates the listed samples, binarizes at `threshold`, and
/// reports micro-averaged metrics plus per-sample rows.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    indices: &[usize],
    threshold: f64,
    batch_size: usize,
) -> Result<MetricReport, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut report = MetricReport::default();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, _) = batch_tensors::<T>(dataset, chunk);
        let probs = crate::model::forward(params, &images)?;
        let plane = dataset.h * dataset.w;
        for (k, &idx) in chunk.iter().enumerate() {
            let pred = binarize(&probs.data()[k * plane..(k + 1) * plane], threshold);
            let counts = ConfusionCounts::from_masks(&pred, &dataset.samples[idx].mask)
                .map_err(TrainError::Config)?;
            report.push(dataset.samples[idx].id.clone(), counts);
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// the training loop
// ---------------------------------------------------------------------------

/// One row of the per-epoch log.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    pub wall_seconds: f64,
}

pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_dice,val_iou,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.3}\n",
            r.epoch, r.train_loss, r.val_dice, r.val_iou, r.wall_seconds
        ));
    }
    out
}

/// Everything a training run produces.
pub struct TrainOutcome<T: Scalar> {
    pub log: Vec<EpochLog>,
    /// Parameters of the epoch with the best validation Dice.
    pub best: ModelParams<T>,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub steps_taken: usize,
    pub split: Split,
}

/// Runs the optimization loop: seeded shuffling, mini-batches, combined
/// loss, Adam updates, per-epoch validation. When the validation split is
/// empty the training split stands in for it, so overfit runs still log a
/// Dice trajectory; the best-validation checkpoint is retained either way.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let split = split_dataset(dataset.len(), cfg.split, cfg.seed)?;
    if split.train.is_empty() {
        return Err(TrainError::Config(
            "training split is empty; increase the train fraction".into(),
        ));
    }
    let val_indices: &[usize] = if split.validation.is_empty() {
        &split.train
    } else {
        &split.validation
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0f0e_0d0c));
    let mut adam = AdamState::<T>::new();
    let mut log = Vec::new();
    let mut best = params.clone();
    let mut best_val_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut steps = 0usize;
    let mut stopped = false;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut order = split.train.clone();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let (images, masks) = batch_tensors::<T>(dataset, batch);
            let tape = Tape::new();
            let mounted = params.mount(&tape);
            let (logits, bn_updates) = forward_logits(&mounted, &images, true)?;
            let loss = combined_loss_logits(&logits, &masks, &cfg.weights, cfg.focal)?;
            let loss_value = loss.item().to_f64c();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: steps,
                    batch_start: batch[0],
                });
            }
            tape.backward(&loss)?;
            let grads = mounted.collect_grads();
            adam.step(params, &grads, cfg.learning_rate)?;
            params.apply_bn_updates(&bn_updates);
            loss_sum += loss_value * batch.len() as f64;
            seen += batch.len();
            steps += 1;
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                stopped = true;
                break;
            }
        }

        let report = evaluate(params, dataset, val_indices, cfg.threshold, cfg.batch_size)?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_dice: report.dice(),
            val_iou: report.iou(),
            wall_seconds: epoch_start.elapsed().as_secs_f64(),
        };
        if row.val_dice > best_val_dice {
            best_val_dice = row.val_dice;
            best = params.clone();
            best_epoch = epoch;
        }
        let reached_target = cfg.stop_dice.is_some_and(|target| row.val_dice >= target);
        log.push(row);
        if stopped || reached_target {
            break;
        }
    }

    Ok(TrainOutcome {
        log,
        best,
        best_val_dice,
        best_epoch,
        steps_taken: steps,
        split,
    })
}
