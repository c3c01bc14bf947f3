//! Training losses: soft Dice, binary cross-entropy and focal loss, plus
//! their weighted combination.
//!
//! The differentiable versions operate on logits (the raw head output) so
//! the log terms are evaluated in a numerically stable form; the sigmoid
//! never has to be inverted or clamped. Plain probability-based evaluations
//! of the same formulas live in [`dice_loss`], [`bce_loss`] and
//! [`focal_loss`]; those clamp probabilities to `[1e-7, 1 - 1e-7]` before
//! logarithms.

use std::sync::Arc;

use crate::error::{TensorError, TensorResult};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tape::{record, Backward, GradSink, NodeId};
use crate::tensor::Tensor;
use crate::Shape;

/// Smoothing added to the numerator and denominator of the Dice loss.
pub const DICE_EPS: f64 = 1.0;

/// Probability clamp applied before logarithms in the plain evaluations.
pub const PROB_CLAMP: f64 = 1e-7;

/// Multipliers of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Dice multiplier.
    pub alpha: f64,
    /// BCE multiplier.
    pub beta: f64,
    /// Focal multiplier.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // equal thirds: the "average weights" combination
        LossWeights {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            lambda: 1.0 / 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.lambda < 0.0 {
            return Err("loss weights must be nonnegative".into());
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.lambda == 0.0 {
            return Err("at least one loss weight must be positive".into());
        }
        Ok(())
    }
}

/// Focal-loss shape parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalConfig {
    /// Balancing factor applied to every pixel.
    pub alpha: f64,
    /// Focusing exponent on `(1 - p_t)`.
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

fn check_shapes<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// differentiable losses on logits
// ---------------------------------------------------------------------------

/// Soft Dice loss from logits: with `p = sigmoid(z)` and probability-weighted
/// counts `TP = sum(p g)`, `FP = sum(p (1-g))`, `FN = sum((1-p) g)`, the loss
/// is `(FP + FN + eps) / (2 TP + FP + FN + eps)`. Reduces to the hard-count
/// form on 0/1 predictions and stays differentiable in between.
pub fn dice_loss_logits<T: Scalar>(
    logits: &Tensor<T>,
    truth: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    check_shapes("dice_loss", logits, truth)?;
    let eps = T::from_f64c(DICE_EPS);
    let p = logits.sigmoid();
    let one_minus_g = truth.scale(-T::one()).add_scalar(T::one());
    let one_minus_p = p.scale(-T::one()).add_scalar(T::one());
    let tp = p.mul(truth)?.sum_all();
    let fp = p.mul(&one_minus_g)?.sum_all();
    let fneg = one_minus_p.mul(truth)?.sum_all();
    let miss = fp.add(&fneg)?;
    let numer = miss.add_scalar(eps);
    let denom = tp.scale(T::from_f64c(2.0)).add(&miss)?.add_scalar(eps);
    numer.div(&denom)
}

struct BceBackward<T: Scalar> {
    z: NodeId,
    z_data: Arc<Vec<T>>,
    truth: Arc<Vec<T>>,
    inv_n: T,
}

impl<T: Scalar> Backward<T> for BceBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let g = go[0] * self.inv_n;
        let gz = sink.accum(self.z);
        for i in 0..gz.len() {
            gz[i] = gz[i] + g * (sigmoid(self.z_data[i]) - self.truth[i]);
        }
    }
}

/// Mean binary cross-entropy from logits, in the stable form
/// `max(z, 0) - z g + ln(1 + e^(-|z|))` per pixel.
pub fn bce_with_logits<T: Scalar>(
    logits: &Tensor<T>,
    truth: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    check_shapes("bce_loss", logits, truth)?;
    let n = T::from_f64c(logits.numel() as f64);
    let mut acc = T::zero();
    for (&z, &g) in logits.data().iter().zip(truth.data()) {
        acc = acc + z.max(T::zero()) - z * g + softplus(-z.abs());
    }
    let data = vec![acc / n];
    Ok(record(&[logits, truth], Shape::new(1, 1, 1, 1), data, || {
        Box::new(BceBackward {
            z: logits.node().unwrap(),
            z_data: logits.data_arc(),
            truth: truth.data_arc(),
            inv_n: T::one() / n,
        })
    }))
}

struct FocalBackward<T: Scalar> {
    z: NodeId,
    z_data: Arc<Vec<T>>,
    truth: Arc<Vec<T>>,
    alpha: T,
    gamma: T,
    inv_n: T,
}

impl<T: Scalar> Backward<T> for FocalBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let half = T::from_f64c(0.5);
        let g0 = go[0] * self.inv_n;
        let gz = sink.accum(self.z);
        for i in 0..gz.len() {
            let positive = self.truth[i] >= half;
            let u = if positive { self.z_data[i] } else { -self.z_data[i] };
            let w = sigmoid(-u); // 1 - p_t
            let sp = softplus(-u); // -ln p_t
            let dldu = -self.alpha
                * w.powf(self.gamma)
                * (self.gamma * (T::one() - w) * sp + w);
            let dz = if positive { dldu } else { -dldu };
            gz[i] = gz[i] + g0 * dz;
        }
    }
}

/// Mean focal loss from logits: `alpha (1 - p_t)^gamma (-ln p_t)` per pixel,
/// where `p_t` is the predicted probability of the true class. With
/// `alpha = 1, gamma = 0` it equals the BCE exactly.
pub fn focal_loss_logits<T: Scalar>(
    logits: &Tensor<T>,
    truth: &Tensor<T>,
    focal: FocalConfig,
) -> TensorResult<Tensor<T>> {
    check_shapes("focal_loss", logits, truth)?;
    let (alpha, gamma) = (T::from_f64c(focal.alpha), T::from_f64c(focal.gamma));
    let half = T::from_f64c(0.5);
    let n = T::from_f64c(logits.numel() as f64);
    let mut acc = T::zero();
    for (&z, &g) in logits.data().iter().zip(truth.data()) {
        let u = if g >= half { z } else { -z };
        let w = sigmoid(-u);
        let sp = softplus(-u);
        acc = acc + alpha * w.powf(gamma) * sp;
    }
    let data = vec![acc / n];
    Ok(record(&[logits, truth], Shape::new(1, 1, 1, 1), data, || {
        Box::new(FocalBackward {
            z: logits.node().unwrap(),
            z_data: logits.data_arc(),
            truth: truth.data_arc(),
            alpha,
            gamma,
            inv_n: T::one() / n,
        })
    }))
}

/// Weighted combination `alpha * dice + beta * bce + lambda * focal`.
/// Zero-weight terms are skipped, so single-loss presets cost one branch.
pub fn combined_loss_logits<T: Scalar>(
    logits: &Tensor<T>,
    truth: &Tensor<T>,
    weights: &LossWeights,
    focal: FocalConfig,
) -> TensorResult<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    let push = |term: Tensor<T>, weight: f64, acc: &mut Option<Tensor<T>>| -> TensorResult<()> {
        let scaled = term.scale(T::from_f64c(weight));
        *acc = Some(match acc.take() {
            Some(a) => a.add(&scaled)?,
            None => scaled,
        });
        Ok(())
    };
    if weights.alpha != 0.0 {
        push(dice_loss_logits(logits, truth)?, weights.alpha, &mut acc)?;
    }
    if weights.beta != 0.0 {
        push(bce_with_logits(logits, truth)?, weights.beta, &mut acc)?;
    }
    if weights.lambda != 0.0 {
        push(
            focal_loss_logits(logits, truth, focal)?,
            weights.lambda,
            &mut acc,
        )?;
    }
    acc.ok_or(TensorError::EmptyReduction(logits.shape()))
}

// ---------------------------------------------------------------------------
// plain probability-based evaluations
// ---------------------------------------------------------------------------

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Soft Dice loss over probabilities.
pub fn dice_loss(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(truth) {
        tp += p * g;
        fp += p * (1.0 - g);
        fneg += (1.0 - p) * g;
    }
    (fp + fneg + DICE_EPS) / (2.0 * tp + fp + fneg + DICE_EPS)
}

/// Mean binary cross-entropy over probabilities.
pub fn bce_loss(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut acc = 0.0;
    for (&p, &g) in pred.iter().zip(truth) {
        let p = clamp_prob(p);
        acc -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
    }
    acc / pred.len() as f64
}

/// Mean focal loss over probabilities.
pub fn focal_loss(pred: &[f64], truth: &[f64], focal: FocalConfig) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut acc = 0.0;
    for (&p, &g) in pred.iter().zip(truth) {
        let pt = clamp_prob(if g >= 0.5 { p } else { 1.0 - p });
        acc += focal.alpha * (1.0 - pt).powf(focal.gamma) * (-pt.ln());
    }
    acc / pred.len() as f64
}

/// Weighted combination over probabilities.
pub fn combined_loss(
    pred: &[f64],
    truth: &[f64],
    weights: &LossWeights,
    focal: FocalConfig,
) -> f64 {
    weights.alpha * dice_loss(pred, truth)
        + weights.beta * bce_loss(pred, truth)
        + weights.lambda * focal_loss(pred, truth, focal)
}
