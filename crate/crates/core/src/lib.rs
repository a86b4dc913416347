//! Deterministic federated-learning simulator with adaptive
//! self-distillation client regularization and client-drift / flatness
//! diagnostics.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod matrix;
pub mod nn;
pub mod regularizers;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
