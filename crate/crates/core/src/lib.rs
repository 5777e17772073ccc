//! Deterministic core of a stereo transformer 3D detection pipeline.
//!
//! The crate covers everything that does not need a trained network:
//!
//! - [`kitti_io`]: KITTI label/calibration parsing, difficulty levels and
//!   the crop + resize preprocessing of stereo pairs.
//! - [`geometry`]: projection, 2D/BEV/3D overlaps and scale-mode conversion.
//! - [`stereo_core`]: correlation volumes, multi-scale fusion and the
//!   upsampling decoders, run from explicit weights.
//! - [`depth_label`]: object-level depth maps, occlusion-aware sampling
//!   points, LID depth bins and bilinear grid sampling with gradients.
//! - [`matching`]: set-matching costs and the Hungarian solver.
//! - [`losses`]: object and global loss terms.
//! - [`evaluation`]: KITTI-style AP@R40 for 3D, BEV and 2D boxes.
//! - [`disparity_bm`]: SAD block matching for disparity ground truth.

pub mod depth_label;
pub mod disparity_bm;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod kitti_io;
pub mod losses;
pub mod matching;
pub mod stereo_core;

pub use error::{Error, Result};
