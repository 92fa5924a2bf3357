//! Gaussian-process emulation of simulators with high-dimensional spatial output.
//!
//! Output fields are reduced with a principal-component or thin-plate
//! regression spline (TPRS) basis and Gaussian processes are fitted to the
//! basis coefficients, either independently per coefficient (sampled by
//! Metropolis MCMC) or with a separable input x output covariance (plug-in).
//! A tensor-product GP on inputs x output locations is provided as a
//! functional-data baseline, together with a two-spill pollutant simulator,
//! space-filling designs and the validation harness that compares them.
//!
//! Runnable walk-throughs live in `examples/`; `cargo run --example <name>`.

pub mod basis;
pub mod cli;
pub mod design;
pub mod emulators;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mcmc;
pub mod sim;

pub use error::{EmuError, Result};
