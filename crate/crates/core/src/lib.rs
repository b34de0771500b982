//! Keypoint-guided self-supervised depth estimation, optimized directly.
//!
//! The crate evaluates a weighted objective made of a descriptor similarity
//! term, a photometric term, edge-aware smoothness, and an explainability
//! regularizer, all with analytic gradients with respect to per-pixel
//! log-depth, per-source SE(3) twists, and per-pixel mask logits. Instead of
//! training networks, depth maps and poses are optimized directly on
//! synthetic multi-view scenes whose ground truth is known.
//!
//! Module map:
//! - [`imgcore`]: images, blur, gradients, bilinear sampling, PGM/PPM/PFM io
//! - [`sift`]: fixed-geometry SIFT descriptors, dense grids, DoG detector
//! - [`geometry`]: pinhole camera, SE(3) exp/log, warp field with Jacobians
//! - [`loss`]: the four loss components and their weighted total
//! - [`optim`]: adaptive-moment optimizer and finite-difference gradient check
//! - [`synth`]: textured-plane scene generator
//! - [`eval`]: Abs Rel / Sq Rel / delta accuracy metrics
//! - [`store`]: `DGRID001` descriptor grid files
//! - [`cli`]: the `kpdepth` command line

// `!(x > 0.0)` is the NaN-rejecting form used throughout validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imgcore;
pub mod loss;
pub mod optim;
pub mod reduce;
pub mod sift;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
