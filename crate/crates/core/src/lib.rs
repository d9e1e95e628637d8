//! Cross-dataset robust blind image quality assessment.
//!
//! The pipeline trains one scorer per labelled dataset, uses the scorers as an
//! ensemble to label random image pairs of an unlabelled pool with sigmoid
//! relative-quality probabilities, and trains a final scorer on those pairs
//! with the fidelity loss through a shared-weight two-stream network.

pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod pseudolabel;
pub mod rng;
pub mod scorer;
pub mod synthbench;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
