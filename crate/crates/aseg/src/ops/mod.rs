//! Differentiable tensor operations.
//!
//! Each operation validates shapes, computes the forward value, and — when
//! some input is tracked on a tape — records a backward rule. Inputs without
//! a tape behave as constants and receive no gradient.

mod activations;
mod conv;
mod elementwise;
mod matmul;
mod norm;
mod patch;
mod pool;

pub use activations::{relu, relu_squared, sigmoid, softmax_last_dim};
pub use conv::conv2d;
pub use elementwise::{
    add, add_broadcast, add_scalar, concat_channels, div, mul, mul_broadcast, scale, slice_w,
    sum_all,
};
pub(crate) use elementwise::reshape_impl;
pub use matmul::{bmm_nn, bmm_nt, matmul, matmul_nt};
pub use norm::{batch_norm, batch_norm_eval, batch_norm_train, BnStats};
pub use patch::{patch_merge, patch_partition};
pub use pool::{pool2d, reduce_channels, reduce_spatial, upsample_nearest, PoolMode};

use crate::error::TensorResult;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> TensorResult<Tensor<T>> {
        add(self, rhs)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> TensorResult<Tensor<T>> {
        mul(self, rhs)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> TensorResult<Tensor<T>> {
        div(self, rhs)
    }

    /// Multiplication by an untracked constant.
    pub fn scale(&self, k: T) -> Tensor<T> {
        scale(self, k)
    }

    /// Addition of an untracked constant.
    pub fn add_scalar(&self, k: T) -> Tensor<T> {
        add_scalar(self, k)
    }

    pub fn relu(&self) -> Tensor<T> {
        relu(self)
    }

    pub fn relu_squared(&self) -> Tensor<T> {
        relu_squared(self)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        sigmoid(self)
    }

    pub fn softmax_last_dim(&self) -> TensorResult<Tensor<T>> {
        softmax_last_dim(self)
    }

    /// Sum of all elements as a `1x1x1x1` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        sum_all(self)
    }

    /// Mean of all elements as a `1x1x1x1` tensor.
    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64c(self.numel() as f64);
        sum_all(self).scale(T::one() / n)
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> TensorResult<Tensor<T>> {
        matmul(self, rhs)
    }
}
