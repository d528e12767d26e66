//! Footstep localization from floor-vibration accelerometer networks.
//!
//! An instrumented floor is treated as a physical reservoir: each foot strike
//! excites a location-dependent vibration field, sampled by a sparse
//! accelerometer network. The pipeline turns those waveforms into footstep
//! coordinates with nothing more than a linear readout:
//!
//! ```text
//! a_j(t) -> detect s_k -> window A_k -> vec r_k -> RMS -> PCA z_k -> W_out -> (x, y) [-> Kalman]
//! ```
//!
//! Modules follow that order:
//!
//! - [`dataset`]: recordings, layouts, labels and model persistence
//! - [`detect`]: composite detection signal and foot-strike peak picking
//! - [`features`]: windowing, vectorization and RMS normalization
//! - [`subspace`]: PCA via thin SVD
//! - [`readout`]: ridge-regression readout
//! - [`tracking`]: constant-velocity Kalman smoothing in step-index domain
//! - [`eval`]: RMSE, confusion matrices and sensor Fisher ratios
//! - [`synth`]: modal-superposition floor simulator used as ground truth
//! - [`experiment`]: end-to-end runs, sweeps and report emission

pub mod dataset;
pub mod detect;
mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod readout;
pub mod subspace;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};
