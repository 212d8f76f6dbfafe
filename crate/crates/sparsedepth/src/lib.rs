//! Self-supervised metric depth estimation from a monocular camera and a
//! few-beam LiDAR.
//!
//! The crate provides the geometric core (pinhole projection, SE(3) poses,
//! differentiable inverse warping), the self-supervision objectives
//! (photometric reconstruction with SSIM and min-over-sources, three LiDAR
//! regression variants, edge-aware smoothness), metric pose estimation via
//! PnP with RANSAC, LiDAR beam segmentation and sub-sampling, a direct
//! per-pixel depth optimizer, a deterministic synthetic scene renderer used
//! as ground-truth oracle, and depth evaluation metrics including the
//! catastrophic distance rate.
//!
//! Coordinate conventions: images are indexed `(row v, column u)`, camera
//! frame is x right / y down / z forward, LiDAR sensor frame is x forward /
//! y left / z up.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod lidar;
pub mod losses;
pub mod optimizer;
pub mod pose;
pub mod synthetic;

pub use error::Error;
pub use geometry::{CameraIntrinsics, DepthMap, ImageBuffer, Mask, PixelCoord, PoseSE3};
pub use lidar::SparseDepthImage;
