//! Continual-learning optimization lab.
//!
//! Orthogonal Gradient Descent (OGD, OGD+) and its natural-gradient variants
//! (ONG, ONG+) preconditioned by an EKFAC approximation of the Fisher, together
//! with the Permuted/Rotated MNIST task generators and forgetting metrics used
//! to compare them.

pub mod cli;
pub mod continual;
pub mod error;
pub mod ekfac;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod projection;
pub mod tasks;

pub use error::{Error, Result};
