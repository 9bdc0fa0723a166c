//! Weakly-supervised 3D human pose estimation from 2D keypoint labels and
//! LiDAR point clouds.
//!
//! The crate covers the full label-to-evaluation loop:
//!
//! * [`geometry`]: pinhole camera and LiDAR-to-image projection.
//! * [`synth`]: procedural pedestrian scenes with ground-truth joints.
//! * [`labelgen`]: pseudo 3D keypoints, reliabilities and pointwise labels
//!   derived from 2D annotations and the projected cloud.
//! * [`fusion`]: keypoint heatmaps and per-point camera features.
//! * [`losses`]: weighted Huber / cross-entropy / heatmap MSE with gradients.
//! * [`pointnet`]: a small two-branch point network trained with SGD.
//! * [`metrics`]: OKS, OKS/ACC and MPJPE.
//! * [`io`]: on-disk formats for scenes, labels, parameters and logs.
//! * [`pipeline`]: glue shared by the CLI (ablations, evaluation runs).
//!
//! Data-parallel loops go through [`par`], which maps onto rayon when the
//! `parallel` feature is on and onto plain iterators otherwise.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod keypoints;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod pointnet;
pub mod rng;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{CameraModel, Point2, Point3};
pub use keypoints::{Keypoint, NUM_KEYPOINTS};
pub use scene::Scene;
