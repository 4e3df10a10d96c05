//! Panoramic affordance grounding at desk scale.
//!
//! The crate turns backbone patch features and class text embeddings into
//! per-class affordance heatmaps over an equirectangular (360°) image:
//!
//! - [`numerics`]: tensor container, panorama-aware convolution and the PFT file format.
//! - [`erp`]: latitude profiles, wraparound augmentations, keypoint supervision.
//! - [`dasm`]: distortion-aware spectral modulation of visual tokens.
//! - [`osdh`]: global semantic discovery and affinity-based densification.
//! - [`objectives`]: BCE / KL / region-text contrastive losses with analytic gradients.
//! - [`metrics`]: KLD, SIM and NSS evaluation and dataset reports.
//! - [`pipeline`]: configuration, parameter initialization and the end-to-end forward pass.
//! - [`cli`]: the `panoafford` command-line surface.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::approx_constant, clippy::needless_range_loop))]

pub mod cli;
pub mod dasm;
pub mod erp;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod osdh;
pub mod pipeline;

pub use error::{Error, Result};
pub use numerics::Tensor;
