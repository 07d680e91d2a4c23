//! Cross-view (ground / aerial / satellite) camera localization toolkit.
//!
//! - [`geometry`]: rotations, poses, camera-pair distance, weighted Procrustes
//! - [`tiles`]: Web-Mercator tiles, quadkeys, cached tile download and stitching
//! - [`scene`]: synthetic heightfield sites, capture trajectories, depth, ortho-rectification
//! - [`curriculum`]: distance-sorted camera sampling and progressive view sampling
//! - [`model`]: forward-only two-stream transformer with masked satellite attention
//! - [`eval`]: relative rotation/translation accuracy, PSNR and report tables

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curriculum;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod raster;
pub mod scene;
pub mod tiles;
