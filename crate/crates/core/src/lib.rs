//! Light-cone reconstruction of predictive states for spatio-temporal fields.
//!
//! The pipeline extracts past and future light cones from a lattice field,
//! groups similar pasts (K-means++ clusters or per-point neighborhoods),
//! merges groups whose future-cone distributions a two-sample test cannot
//! tell apart, and forecasts each new point with the mean future of its
//! predictive state. Simulation, parametric baselines and a split-half
//! cross-validation harness sit on top.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cones;
pub mod cv;
pub mod error;
pub mod field;
pub mod forecast;
pub mod matrix;
pub mod neighborhoods;
pub mod par;
pub mod simulate;
pub mod states;
pub mod two_sample;

pub use cones::{cone_offsets, extract_cones, ConeGeometry, ConeSet, Presence};
pub use error::{Error, Result};
pub use field::{Boundary, Field};
pub use matrix::RowMatrix;
pub use states::{FitMode, FitOptions, StateModel, TrainingSetup};
