//! Desk-scale 3D Gaussian splatting with active view and touch selection.
//!
//! The crate trains an explicit Gaussian-splat scene from a handful of posed
//! RGB-D views, scores candidate camera poses by the Fisher information their
//! rendered color/depth would carry about the scene parameters, and refines
//! the result with simulated tactile depth views. Everything runs on the CPU
//! in `f64` and is deterministic given a seed.
//!
//! The pieces, bottom to top:
//!
//! - [`scene`] — Gaussian parameterization, parameter flattening, covariance.
//! - [`camera`] — poses, intrinsics, pinhole/fisheye projection, se(3) pose deltas.
//! - [`render`] — forward rasterizer: color, depth, alpha, object-mask channels.
//! - [`raycast`] — analytic ground-truth geometry and depth/mask raycasting.
//! - [`gradients`] — training losses, analytic backward pass, finite-difference oracle.
//! - [`align`] — mask-aware affine alignment of monocular depth, depth lifting.
//! - [`fisher`] — diagonal-Hessian information scores and next-best-view selection.
//! - [`touch`] — simulated tactile sensing and depth-only touch views.
//! - [`trainer`] — Adam-style optimization loop with scheduled view insertion.
//! - [`harness`] — synthetic worlds, sensor simulation, metrics, A/B experiments.
//! - [`io`] — PPM/PGM images, raw float depth files, scene/candidate JSON.
//!
//! Each major capability has a runnable example under `examples/`; the
//! `desksplat` binary exposes the same operations as batch subcommands.

pub mod align;
pub mod camera;
pub mod cli;
pub mod fisher;
pub mod gradients;
pub mod grid;
pub mod harness;
pub mod io;
pub mod math;
pub mod raycast;
pub mod render;
pub mod scene;
pub mod touch;
pub mod trainer;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("no feasible candidate view")]
    NoFeasibleView,
    #[error("no viable touch candidate")]
    NoFeasibleTouch,
    #[error("touch produced no usable contact points: {0}")]
    EmptyTouch(String),
    #[error("view retreat failed: {0}")]
    RetreatFailed(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
