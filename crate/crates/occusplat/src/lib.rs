//! Differentiable 3D Gaussian splatting for driving scenes.
//!
//! The pipeline turns per-frame semantic occupancy grids plus posed camera
//! images into two optimizable Gaussian models -- a static street model and a
//! set of per-vehicle models with learnable per-frame pose corrections -- and
//! fits them photometrically with a tile-based software rasterizer that
//! carries analytic gradients for every parameter, pose deltas included.
//!
//! Module layout:
//! - [`geom`]: quaternions, poses, covariance recovery, spherical harmonics
//!   and their time-Fourier extension, plus the backward (VJP) kernels the
//!   rasterizer chains through.
//! - [`occupancy`]: grid thresholding, semantic argmax, connected components,
//!   track association, dynamic classification, upsampling and colorization.
//! - [`scene`]: street / vehicle models and world-frame assembly.
//! - [`render`]: projection, tiling, front-to-back compositing, backward.
//! - [`optim`]: L1 + D-SSIM loss, Adam, densification, the training loop.
//! - [`harness`]: PSNR/SSIM metrics, brute-force reference renderer and the
//!   synthetic scene generator used for end-to-end evaluation.
//! - [`io`]: binary grid format, PLY, manifests, checkpoints, PNG.

pub mod error;
pub mod geom;
pub mod harness;
pub mod image_buf;
pub mod io;
pub mod occupancy;
pub mod optim;
pub mod render;
pub mod scene;

pub use error::{Error, Result};
