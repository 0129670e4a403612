//! Depth reconstruction for focused (plenoptic 2.0) light-field cameras
//! paired with a high-resolution reference channel.
//!
//! The processing chain runs in four steps:
//!
//! 1. [`superres`]: patch-based super-resolution of elemental images using
//!    the HR frame as an example dictionary.
//! 2. [`disparity`]: sparse disparities from adjacent elemental images,
//!    treating the microlens array as a grid of stereo cameras.
//! 3. [`depth`]: disparity to virtual depth `a = B d / D`, calibration to
//!    object depth, and smooth densification.
//! 4. [`fusion`]: light-field view reconstruction, registration to the HR
//!    frame, depth warping and RGB-D assembly.
//!
//! [`simulator`] renders both channels from scenes with known geometry and
//! [`analysis`] hosts the evaluation harnesses built on top of it.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod depth;
pub mod disparity;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod io;
pub mod pipeline;
pub mod simulator;
pub mod superres;

pub use error::{Error, Result};
pub use geometry::CameraModel;
pub use image::{Image, Mask};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
