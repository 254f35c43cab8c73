//! Multi-level contrastive learning and matching for semantic correspondence.
//!
//! The crate is `no_std` (it needs `alloc`) and purely computational: file
//! formats, threading and the command line live in `cyclecorr-cli`.
//!
//! Layout:
//! - [`tensor`] and [`graph`]: dense `f32` storage and a small reverse-mode
//!   gradient engine with a closed primitive set.
//! - [`features`]: feature stacks, hyperpixels, self-attention maps, the
//!   trainable projection heads and attention-guided augmentation.
//! - [`matching`]: correlation, affinity, position transfer, Sinkhorn OT,
//!   Hough re-weighting and keypoint read-out.
//! - [`objectives`]: InfoNCE with a negative queue, momentum update, the pixel
//!   cycle loss, correlation entropy and the training step.
//! - [`search`]: PCK, per-pair evaluation, beam search over layer subsets and
//!   the synthetic pair generator.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
pub mod features;
pub mod graph;
pub mod matching;
mod math;
pub mod objectives;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{finite_diff_check, value_and_grad, Graph, NamedTensors, NodeId};
pub use tensor::Tensor;
