//! Text classification with a confidence-weighted loss family, adaptive-bound
//! optimization and small hand-differentiated encoders.

pub mod data;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod optim;

pub use error::{Error, Result};
