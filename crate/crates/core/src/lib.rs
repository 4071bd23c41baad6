//! Joint camera pose, focal length and depth-deformation estimation for
//! consistent depth from monocular video.
//!
//! The crate turns per-frame depth maps and optical flow into camera poses,
//! focal lengths and per-frame bilinear deformation grids that make the depth
//! maps agree with each other, then filters the aligned depths along flow.

// `!(x > 0.0)` is how NaN gets rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod correspondence;
pub mod deformation;
pub mod depthfilter;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod par;
pub mod pipeline;
pub mod solver;
pub mod synthgen;

pub use error::{Error, Result};
