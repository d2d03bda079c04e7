//! A desk-scale laboratory for the implicit bias of SGD without replacement.
//!
//! The crate simulates the optimizer variants (without replacement, with
//! replacement, shuffle-once, full-batch GD, noised GD), computes the
//! predicted per-epoch bias step in closed form, and checks the predictions
//! against exact enumeration over batch orderings on small problems.

pub mod bias;
pub mod error;
pub mod expectation;
pub mod harness;
pub mod optimize;
pub mod par;
pub mod predictors;
pub mod problem;
pub mod problems;
pub mod schedule;
pub mod validate;

pub use error::{Error, Result};
pub use problem::{Dataset, Datum, HessianSpectrum, Hyperparams, LossOracle, ParamVector};
pub use schedule::{BatchSchedule, SamplingPolicy};
