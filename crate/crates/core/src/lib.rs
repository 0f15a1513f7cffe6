//! Driving-regime embedded car-following modeling.
//!
//! The crate covers the whole pipeline from raw leader-follower trajectories to
//! evaluated closed-loop simulations:
//!
//! * [`traj`] and [`synth`]: trajectory data model, CSV ingestion, pair extraction
//!   and physics-driven synthetic scenarios.
//! * [`segment`], [`dtw`], [`regime`]: unsupervised driving-regime labeling
//!   (bottom-up segmentation, DTW-based car-following/free-flow split, slope
//!   classifier).
//! * [`physics`]: Newell and IDM baselines and genetic-algorithm IDM calibration.
//! * [`nn`] and [`train`]: the hybrid GRU regime predictor + LSTM kinematic model,
//!   written from scratch with analytic gradients, and its curriculum trainer.
//! * [`sim`]: closed-loop single-vehicle and platoon simulation, MSE evaluation
//!   and plot-ready exports.

pub mod dtw;
pub mod error;
pub mod kinematics;
pub mod nn;
pub mod physics;
pub mod regime;
pub mod segment;
pub mod sim;
pub mod synth;
pub mod train;
pub mod traj;
pub mod util;

pub use error::{Error, Result};

/// Global simulation and sampling step in seconds.
pub const DT: f64 = 0.1;
