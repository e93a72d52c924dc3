//! Stereo image deraining with semantic priors.
//!
//! This crate contains the complete desk-scale pipeline:
//!
//! * [`synth`] — procedural stereo rainy-scene generator with ground-truth
//!   segmentation, disparity, and per-view rain layers,
//! * [`tensor`] / [`graph`] / [`nn`] — a small reverse-mode autodiff engine and
//!   the convolutional building blocks (plain convs, ResBlocks, DenseBlocks,
//!   encoder/decoder stacks),
//! * [`sadm`], [`prrnet`], [`eprrnet`] — the deraining networks: a
//!   semantic-aware deraining module with a conditional decoder, the paired
//!   rain-removal pipeline (SFNet + VFNet), and the enhanced coarse-to-fine
//!   pipeline (coarse net + ESFNet + EVFNet),
//! * [`objectives`] — reconstruction, segmentation, rethinking-consistency and
//!   cross-view losses plus their weighted total,
//! * [`train`] — deterministic single-threaded training with the
//!   semantic-rethinking loop, checkpointing, and the ablation suite,
//! * [`metrics`] / [`eval`] — PSNR / SSIM / mIoU and benchmark reports,
//! * [`data`] / [`checkpoint`] / [`config`] — dataset and checkpoint formats
//!   and the key=value experiment configuration layer.

pub mod data;
pub mod eprrnet;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod prrnet;
pub mod sadm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
