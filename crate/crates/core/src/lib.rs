//! Desk-scale toolkit for parametric human body models: a procedural
//! SMPL-like template with linear blend skinning, differentiable rendering
//! of silhouettes and keypoint heatmaps, synthetic training-pair generation
//! with proxy-representation augmentation, a trainable silhouette+keypoint
//! regressor, and a multi-frame model fitter with a shared shape across
//! frames. Everything is deterministic under explicit seeds and runs on a
//! single core with no GPU.

pub mod augment;
pub mod bank;
pub mod camera;
pub mod config;
pub mod diff;
pub mod error;
pub mod fitter;
pub mod gmm;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pr;
pub mod raster;
pub mod regressor;
pub mod rng;
pub mod rot;
pub mod scenario;
pub mod synth;

pub use error::{Error, Result};
