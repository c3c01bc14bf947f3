//! Batch normalization.
//!
//! Training mode normalizes with the (biased) statistics of the current
//! batch; inference mode uses stored running statistics. The running
//! statistics themselves are state, not graph nodes: [`batch_norm_train`]
//! returns the batch statistics so the caller can fold them into its store,
//! and [`batch_norm`] is the stateful convenience wrapper that does so via an
//! exponential moving average.

use std::sync::Arc;

use crate::error::{TensorError, TensorResult};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{record, Backward, GradSink, NodeId};
use crate::tensor::Tensor;

/// Running mean and variance, one entry per channel.
#[derive(Clone, Debug)]
pub struct BnStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    /// Fresh statistics: zero mean, unit variance.
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential moving average update with the given momentum.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = keep * *r + momentum * b;
        }
    }
}

fn check_params<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> TensorResult<()> {
    let c = x.shape().c();
    for p in [scale, shift] {
        if p.numel() != c {
            return Err(TensorError::BatchNormParams {
                param: p.numel(),
                channels: c,
            });
        }
    }
    Ok(())
}

struct BnTrainBackward<T: Scalar> {
    x: Option<NodeId>,
    scale: Option<NodeId>,
    shift: Option<NodeId>,
    x_data: Arc<Vec<T>>,
    scale_data: Arc<Vec<T>>,
    x_shape: Shape,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for BnTrainBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let s = self.x_shape;
        let plane = s.h() * s.w();
        let m = T::from_f64c((s.n() * plane) as f64);

        // Per-channel sums of dy and dy * x_hat, in fixed n-major order.
        let mut sum_dy = vec![T::zero(); s.c()];
        let mut sum_dy_xhat = vec![T::zero(); s.c()];
        for n in 0..s.n() {
            for c in 0..s.c() {
                let base = (n * s.c() + c) * plane;
                let mut a = T::zero();
                let mut b = T::zero();
                for i in 0..plane {
                    let dy = go[base + i];
                    let xhat = (self.x_data[base + i] - self.mean[c]) * self.inv_std[c];
                    a = a + dy;
                    b = b + dy * xhat;
                }
                sum_dy[c] = sum_dy[c] + a;
                sum_dy_xhat[c] = sum_dy_xhat[c] + b;
            }
        }

        if let Some(id) = self.scale {
            let g = sink.accum(id);
            for c in 0..s.c() {
                g[c] = g[c] + sum_dy_xhat[c];
            }
        }
        if let Some(id) = self.shift {
            let g = sink.accum(id);
            for c in 0..s.c() {
                g[c] = g[c] + sum_dy[c];
            }
        }
        if let Some(id) = self.x {
            let gx = sink.accum(id);
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let base = (n * s.c() + c) * plane;
                    let k = self.scale_data[c] * self.inv_std[c];
                    let mean_dy = sum_dy[c] / m;
                    let mean_dy_xhat = sum_dy_xhat[c] / m;
                    for i in 0..plane {
                        let xhat = (self.x_data[base + i] - self.mean[c]) * self.inv_std[c];
                        gx[base + i] =
                            gx[base + i] + k * (go[base + i] - mean_dy - xhat * mean_dy_xhat);
                    }
                }
            }
        }
    }
}

/// Batch-statistics normalization: returns the normalized tensor plus the
/// per-channel batch mean and (biased) variance for running-stat updates.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> TensorResult<(Tensor<T>, Vec<T>, Vec<T>)> {
    check_params(x, scale, shift)?;
    let s = x.shape();
    let plane = s.h() * s.w();
    let m = T::from_f64c((s.n() * plane) as f64);
    let xd = x.data();

    let mut mean = vec![T::zero(); s.c()];
    let mut var = vec![T::zero(); s.c()];
    for c in 0..s.c() {
        let mut acc = T::zero();
        for n in 0..s.n() {
            let base = (n * s.c() + c) * plane;
            for i in 0..plane {
                acc = acc + xd[base + i];
            }
        }
        mean[c] = acc / m;
        let mut vacc = T::zero();
        for n in 0..s.n() {
            let base = (n * s.c() + c) * plane;
            for i in 0..plane {
                let d = xd[base + i] - mean[c];
                vacc = vacc + d * d;
            }
        }
        var[c] = vacc / m;
    }

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut data = vec![T::zero(); s.numel()];
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = (n * s.c() + c) * plane;
            let (g, b) = (scale.data()[c], shift.data()[c]);
            for i in 0..plane {
                data[base + i] = g * (xd[base + i] - mean[c]) * inv_std[c] + b;
            }
        }
    }

    let out = record(&[x, scale, shift], s, data, || {
        Box::new(BnTrainBackward {
            x: x.node(),
            scale: scale.node(),
            shift: shift.node(),
            x_data: x.data_arc(),
            scale_data: scale.data_arc(),
            x_shape: s,
            mean: mean.clone(),
            inv_std,
        })
    });
    Ok((out, mean, var))
}

struct BnEvalBackward<T: Scalar> {
    x: Option<NodeId>,
    scale: Option<NodeId>,
    shift: Option<NodeId>,
    x_data: Arc<Vec<T>>,
    scale_data: Arc<Vec<T>>,
    x_shape: Shape,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for BnEvalBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let s = self.x_shape;
        let plane = s.h() * s.w();
        if let Some(id) = self.x {
            let gx = sink.accum(id);
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let base = (n * s.c() + c) * plane;
                    let k = self.scale_data[c] * self.inv_std[c];
                    for i in 0..plane {
                        gx[base + i] = gx[base + i] + go[base + i] * k;
                    }
                }
            }
        }
        if let Some(id) = self.scale {
            let g = sink.accum(id);
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let base = (n * s.c() + c) * plane;
                    let mut acc = T::zero();
                    for i in 0..plane {
                        acc = acc
                            + go[base + i] * (self.x_data[base + i] - self.mean[c]) * self.inv_std[c];
                    }
                    g[c] = g[c] + acc;
                }
            }
        }
        if let Some(id) = self.shift {
            let g = sink.accum(id);
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let base = (n * s.c() + c) * plane;
                    let mut acc = T::zero();
                    for i in 0..plane {
                        acc = acc + go[base + i];
                    }
                    g[c] = g[c] + acc;
                }
            }
        }
    }
}

/// Normalization with fixed (running) statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> TensorResult<Tensor<T>> {
    check_params(x, scale, shift)?;
    let s = x.shape();
    if mean.len() != s.c() || var.len() != s.c() {
        return Err(TensorError::BatchNormParams {
            param: mean.len(),
            channels: s.c(),
        });
    }
    let plane = s.h() * s.w();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xd = x.data();
    let mut data = vec![T::zero(); s.numel()];
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = (n * s.c() + c) * plane;
            let (g, b) = (scale.data()[c], shift.data()[c]);
            for i in 0..plane {
                data[base + i] = g * (xd[base + i] - mean[c]) * inv_std[c] + b;
            }
        }
    }
    let mean = mean.to_vec();
    Ok(record(&[x, scale, shift], s, data, || {
        Box::new(BnEvalBackward {
            x: x.node(),
            scale: scale.node(),
            shift: shift.node(),
            x_data: x.data_arc(),
            scale_data: scale.data_arc(),
            x_shape: s,
            mean,
            inv_std,
        })
    }))
}

/// Stateful batch normalization: training mode normalizes by batch
/// statistics and folds them into `stats` with the given momentum; inference
/// mode normalizes by `stats`.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    stats: &mut BnStats<T>,
    training: bool,
    eps: T,
    momentum: T,
) -> TensorResult<Tensor<T>> {
    if training {
        let (y, mean, var) = batch_norm_train(x, scale, shift, eps)?;
        stats.update(&mean, &var, momentum);
        Ok(y)
    } else {
        batch_norm_eval(x, scale, shift, &stats.mean, &stats.var, eps)
    }
}
