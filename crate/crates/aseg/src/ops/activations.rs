//! Pointwise nonlinearities and the row softmax.

use std::sync::Arc;

use crate::error::{TensorError, TensorResult};
use crate::scalar::{self, Scalar};
use crate::tape::{record, Backward, GradSink, NodeId};
use crate::tensor::Tensor;

struct ReluBackward<T: Scalar> {
    x: NodeId,
    x_data: Arc<Vec<T>>,
}

impl<T: Scalar> Backward<T> for ReluBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let gx = sink.accum(self.x);
        for i in 0..go.len() {
            if self.x_data[i] > T::zero() {
                gx[i] = gx[i] + go[i];
            }
        }
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    record(&[x], x.shape(), data, || {
        Box::new(ReluBackward {
            x: x.node().unwrap(),
            x_data: x.data_arc(),
        })
    })
}

struct ReluSquaredBackward<T: Scalar> {
    x: NodeId,
    x_data: Arc<Vec<T>>,
}

impl<T: Scalar> Backward<T> for ReluSquaredBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let two = T::from_f64c(2.0);
        let gx = sink.accum(self.x);
        for i in 0..go.len() {
            let v = self.x_data[i];
            if v > T::zero() {
                gx[i] = gx[i] + go[i] * two * v;
            }
        }
    }
}

/// `relu_squared(x) = max(x, 0)^2`; exactly zero on the nonpositive range.
pub fn relu_squared<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let r = v.max(T::zero());
            r * r
        })
        .collect();
    record(&[x], x.shape(), data, || {
        Box::new(ReluSquaredBackward {
            x: x.node().unwrap(),
            x_data: x.data_arc(),
        })
    })
}

struct SigmoidBackward<T: Scalar> {
    x: NodeId,
    y_data: Arc<Vec<T>>,
}

impl<T: Scalar> Backward<T> for SigmoidBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let gx = sink.accum(self.x);
        for i in 0..go.len() {
            let y = self.y_data[i];
            gx[i] = gx[i] + go[i] * y * (T::one() - y);
        }
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let y: Arc<Vec<T>> = Arc::new(x.data().iter().map(|&v| scalar::sigmoid(v)).collect());
    let y_for_op = Arc::clone(&y);
    crate::tape::record_arc(&[x], x.shape(), y, move || {
        Box::new(SigmoidBackward {
            x: x.node().unwrap(),
            y_data: y_for_op,
        })
    })
}

struct SoftmaxBackward<T: Scalar> {
    x: NodeId,
    y_data: Arc<Vec<T>>,
    row: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxBackward<T> {
    fn apply(&self, go: &[T], sink: &mut GradSink<'_, T>) {
        let gx = sink.accum(self.x);
        for (r, (go_row, y_row)) in go.chunks(self.row).zip(self.y_data.chunks(self.row)).enumerate()
        {
            let mut dot = T::zero();
            for (&g, &y) in go_row.iter().zip(y_row) {
                dot = dot + g * y;
            }
            let out = &mut gx[r * self.row..(r + 1) * self.row];
            for i in 0..self.row {
                out[i] = out[i] + y_row[i] * (go_row[i] - dot);
            }
        }
    }
}

/// Row-wise softmax over the last extent; rows are nonnegative and sum to 1.
pub fn softmax_last_dim<T: Scalar>(x: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let row = x.shape().w();
    if row == 0 {
        return Err(TensorError::EmptyReduction(x.shape()));
    }
    let mut data = vec![T::zero(); x.numel()];
    for (out, xs) in data.chunks_mut(row).zip(x.data().chunks(row)) {
        let mut max = xs[0];
        for &v in xs {
            max = max.max(v);
        }
        let mut sum = T::zero();
        for (o, &v) in out.iter_mut().zip(xs) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    }
    let y = Arc::new(data);
    let y_for_op = Arc::clone(&y);
    Ok(crate::tape::record_arc(&[x], x.shape(), y, move || {
        Box::new(SoftmaxBackward {
            x: x.node().unwrap(),
            y_data: y_for_op,
            row,
        })
    }))
}
