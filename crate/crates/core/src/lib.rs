//! Semantic road-marking maps built from crowd-sourced drives.
//!
//! The crate covers the full data path:
//!
//! * [`geometry`]: camera model and inverse perspective mapping of segmented
//!   pixels onto the ground;
//! * [`posegraph`]: GNSS/odometry trajectory smoothing;
//! * [`grid`]: the voted 0.1 m semantic grid, local map building and merging;
//! * [`codec`]: top-view contour compression and its binary container;
//! * [`localizer`]: label-aware ICP against a decompressed map, fused with
//!   odometry in an EKF;
//! * [`sim`]: a deterministic road-world and drive simulator with ground truth;
//! * [`pipeline`]: the end-to-end stages wired together.

pub mod geometry;
pub mod codec;
pub mod grid;
pub mod localizer;
pub mod posegraph;
pub mod sim;
pub mod pipeline;
