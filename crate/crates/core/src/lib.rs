//! Closed-loop acoustic howling simulation and suppression with a
//! frequency-domain Kalman filter augmented by small recurrent networks.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f64`, which is what the trainer and the
//! command-line tool use.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod fdkf;
pub mod loopsim;
pub mod metrics;
pub mod neural;
pub mod neural_kalman;
pub mod parallel;
pub mod real;
pub mod room;
pub mod scene;
pub mod signal;
pub mod speech;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
pub use real::{Cplx, Real};

pub type Signal = signal::TimeSignal<f64>;
pub type Spectrum = signal::SpectrumFrame<f64>;
pub type Rir = room::Rir<f64>;
