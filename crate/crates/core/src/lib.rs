//! Adaptive Bayesian estimation of the two relaxation rates of a three-level
//! spin from drift-insensitive fluorescence measurements.
//!
//! Rates are in ms⁻¹, delays in ms and wall-clock times in seconds.

pub mod design;
pub mod error;
pub mod harness;
pub mod inference;
pub mod protocol_zoo;
pub mod random;
pub mod ratio_estimator;
pub mod signal_model;
pub mod spin_model;

pub use error::{Error, Result};
pub use spin_model::{Branch, Propagator, RatePair, SpinState};
