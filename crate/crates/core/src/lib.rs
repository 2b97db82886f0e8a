//! Referring multi-object tracking with counterfactual supervision.
//!
//! A cross-modal scoring network rates prior-supplied proposals against a
//! referring expression; the scores drive a two-stage tracking-by-detection
//! associator, and HOTA evaluates the resulting tracks.

pub mod cli;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod hmsi;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod parallel;
pub mod priors;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
