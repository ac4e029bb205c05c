//! Detuning estimation for superconducting RF cavities.
//!
//! The crate bundles a coupled electromagnetic/mechanical cavity simulator,
//! spectral diagnostics, a classical Kalman filter baseline and the KIND
//! estimator: a stationary Koopman operator fit by least squares, an
//! attention-inferred transient operator, and uncertainty-weighted blending
//! of the two.

pub mod error;
pub mod kalman;
pub mod kind;
pub mod cavity;
pub mod rng;
pub mod series;
pub mod spectrum;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
