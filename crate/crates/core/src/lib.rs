//! Deep feature reweighting workbench on synthetic spurious-correlation data.
//!
//! The pipeline trains a small CNN by ERM, retrains only its linear head on a
//! group-balanced subset with L1-regularized logistic regression, evaluates
//! per-group accuracy, and inspects which feature channels the retrained head
//! keeps using class activation maps scored against ground-truth masks.

pub mod datagen;
pub mod dfr;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
