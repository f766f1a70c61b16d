//! Trajectory-complexity generalization bounds for gradient descent and SGD.
//!
//! The crate trains small models with GD or SGD, tracks per-step statistics
//! of the gradient field along the way, and turns them into data-dependent
//! generalization bounds that can be compared against classical
//! algorithmic-stability bounds.

pub mod bounds;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod optim;
pub mod trajectory;

pub use error::{Error, Result};
