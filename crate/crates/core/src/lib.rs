//! Pathologist attention modelling on whole-slide images.
//!
//! Raw viewport trajectories are simplified into scanpaths, a heatmap network
//! predicts where readers look at each magnification, and an autoregressive
//! scanpath network generates fixation sequences with magnification changes.
//! Synthetic slides and readers, chance baselines and the evaluation metrics
//! are included so the whole pipeline runs without external data.

mod error;
pub mod baselines;
pub mod features;
pub mod heatmap;
pub mod heatmap_model;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod scanpath_model;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::{Fixation, MagLevel, RawTrajectory, Scanpath, SimplifyParams, ViewportSample, WsiBounds};
