//! Desk-scale laboratory for self-supervised multi-view stereo with
//! probabilistic self-distillation.
//!
//! The crate is organized as a pipeline of small, separately testable layers:
//!
//! * [`grid`] — dense H×W×C `f64` planar grids, the only tensor type used.
//! * [`diff`] — a minimal eager reverse-mode autodiff tape over grids.
//! * [`geometry`] — pinhole cameras, homography warps, depth hypothesis sets.
//! * [`synth`] — procedural scene generation with analytic ground-truth depth.
//! * [`model`] — a three-stage cascaded plane-sweep depth network.
//! * [`selfsup`] — photometric + featuremetric self-supervision losses.
//! * [`crosscheck`] — geometric cross-view validation of depth maps.
//! * [`distill`] — Gaussian pseudo-label encoding and KL distillation loss.
//! * [`fusion`] — point-cloud fusion and reconstruction/depth metrics.
//! * [`dataset`], [`config`], [`pipeline`] — on-disk scenes, run configuration
//!   and the teacher → validate → encode → student training loop.
//! * [`io`] — the file formats used at module boundaries (PFM, PPM, PLY,
//!   camera text files, binary sidecars, checkpoints).
//!
//! Conventions, fixed once and used everywhere: extrinsics map world to
//! camera as `x_cam = R · x_world + t`; pixel coordinates are pixel-center
//! based with `(0, 0)` the center of the top-left pixel; depth is the z
//! coordinate in the camera frame; all math is `f64`.

pub mod config;
pub mod crosscheck;
pub mod dataset;
pub mod diff;
pub mod distill;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod selfsup;
pub mod synth;

mod error;

pub use error::{Error, Result};
pub use grid::Grid;
