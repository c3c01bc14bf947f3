//! Error types shared across the crate.

use crate::shape::Shape;

/// Errors raised by tensor operations and the tape.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("conv2d: input has {input_c} channels but kernel expects {kernel_c} (input {input}, kernel {kernel})")]
    ChannelMismatch {
        input: Shape,
        kernel: Shape,
        input_c: usize,
        kernel_c: usize,
    },

    #[error("conv2d: non-integral or non-positive output extent for input {input}, kernel {kernel}, stride {stride}, padding {padding}, dilation {dilation}")]
    ConvGeometry {
        input: Shape,
        kernel: Shape,
        stride: usize,
        padding: usize,
        dilation: usize,
    },

    #[error("pool2d: window {window} exceeds spatial extents of {input}")]
    PoolWindow { input: Shape, window: usize },

    #[error("pool2d: extents of {input} minus window {window} not divisible by stride {stride}")]
    PoolGeometry {
        input: Shape,
        window: usize,
        stride: usize,
    },

    #[error("{op}: inner extents disagree, {lhs} vs {rhs}")]
    MatmulInner {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("patch size {m} does not divide spatial extents of {input}")]
    PatchSize { input: Shape, m: usize },

    #[error("reshape: cannot view {from} ({from_numel} elements) as {to} ({to_numel} elements)")]
    Reshape {
        from: Shape,
        to: Shape,
        from_numel: usize,
        to_numel: usize,
    },

    #[error("{op}: broadcast shape {rhs} incompatible with {lhs} (each extent must match or be 1)")]
    Broadcast {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("batch_norm: parameter length {param} does not match {channels} channels")]
    BatchNormParams { param: usize, channels: usize },

    #[error("upsample: factor must be positive")]
    UpsampleFactor,

    #[error("backward: loss tensor is not recorded on the tape")]
    NotOnTape,

    #[error("backward: loss must be scalar, got {0}")]
    NotScalar(Shape),

    #[error("operands belong to different tapes")]
    TapeMismatch,

    #[error("reduction over an empty extent in {0}")]
    EmptyReduction(Shape),
}

pub type TensorResult<T> = Result<T, TensorError>;
