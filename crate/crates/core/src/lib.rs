//! Adversarial robustness toolkit: small CNN classifiers and VAEs on a
//! tape-based autodiff engine, gradient-sign attacks, reconstruction and
//! filtering defenses, and a sweep harness that scores them.

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod report;
pub mod rng;
pub mod sweep;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
