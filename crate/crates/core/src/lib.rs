//! Confidence-guided abstention modelling.
//!
//! Calibrate option confidences, fit two-stage threshold policies, steer a
//! synthetic agent and decompose the steering effect through two mediators.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod cli;
pub mod error;
pub mod features;
pub mod glm;
pub mod llmio;
pub mod mediate;
pub mod policy;
mod serde_nan;
pub mod steerlab;
pub mod trialstore;

pub use error::{Error, Result};
