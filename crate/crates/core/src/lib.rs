//! Text-to-comic generation pipeline.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`corpus`]: procedural rendering of labeled comic-style panels
//! - [`describe`]: label -> text description formulation with permutation
//!   and background-position augmentation
//! - [`dialogue`]: transcript parsing and panel/dialogue pairing
//! - [`encoder`]: multi-label comics CNN doubling as the image encoder
//! - [`damsm`]: joint text/image matching model (word-region attention)
//! - [`gan`]: multi-stage attentional generator with per-stage
//!   discriminators, plus an unconditional baseline
//! - [`metrics`]: Fréchet distance over fitted feature Gaussians,
//!   checkpoint FID series, classifier metrics
//! - [`pipeline`]: end-to-end orchestration, config profiles, manifests
//!
//! All training and generation is deterministic given a master seed; the
//! numeric kernels live in [`nn`] and run on the CPU.

pub mod corpus;
pub mod damsm;
pub mod describe;
pub mod dialogue;
pub mod encoder;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
