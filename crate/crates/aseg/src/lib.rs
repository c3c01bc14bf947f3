//! Attention-augmented residual U-Net for binary image segmentation.
//!
//! The crate is a self-contained desk-scale segmentation engine: dense rank-4
//! tensor kernels with reverse-mode differentiation, channel/spatial and
//! hybrid sparse/dense self-attention on the skip connections, a compound
//! Dice + BCE + focal loss, Adam training, PGM image I/O, a binary checkpoint
//! format and a CLI. Every backward rule is certified against central finite
//! differences; see the `gradcheck` module and the `aseg gradcheck`
//! subcommand.
//!
//! A narrative guide with runnable snippets lives in `book/`; its code blocks
//! are compiled as doc-tests (see the `book` module at the bottom of this
//! file).

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod shape;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{TensorError, TensorResult};
pub use scalar::Scalar;
pub use shape::Shape;
pub use tape::Tape;
pub use tensor::Tensor;

// The guide's code blocks compile as doc-tests, keeping the book and the
// library in lockstep.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
