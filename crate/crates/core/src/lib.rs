//! Factor-graph symbol detection for linear ISI channels with AWGN.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithmic piece:
//! log-domain arithmetic, constellations, the ISI channel model, observation
//! models built from FIR preprocessors, the generalized factor-graph detector,
//! its multi-stage multi-branch extension, exact and classical baselines,
//! bit metrics, and a reverse-mode tape used to train detector parameters.
//!
//! IO, configuration, persistence and parallel execution live in the
//! companion `gapdetect` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod baselines;
pub mod channel;
pub mod error;
pub mod gap;
pub mod gfg;
pub mod logdomain;
pub mod metrics;
pub mod modem;
pub mod observation;
pub mod tape;
pub mod training;

mod math;

pub use error::{Error, Result};
pub use num_complex::Complex64;
