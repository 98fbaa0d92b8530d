//! One-class continuous authentication from smartphone motion sensors.
//!
//! The crate trains an adversarial autoencoder with local relative attention
//! on a single legitimate user's 12×50 sensor windows, scores new windows
//! with a manifold-density probability, and evaluates FAR/FRR/EER/AUROC,
//! including cross-dataset random-attack protocols. See the `examples/`
//! directory for one runnable walkthrough per capability.

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod ingestion;
pub mod networks;
pub mod nn;
pub mod preprocessing;
pub mod scoring;
pub mod training;

pub use error::{Error, ErrorClass, Result};
