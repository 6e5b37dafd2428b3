//! Bilevel (atom + residue) protein representation learning.
//!
//! The pipeline runs chain ingestion ([`structures`]) → clean-structure
//! labels ([`geometry`]) → span masking and coordinate noise ([`masking`]) →
//! KNN graph construction ([`graph`]) → featurization ([`encodings`]) →
//! the two-track sparse attention network ([`model`]) → pre-training and
//! fine-tuning losses ([`objectives`]) → optimization ([`training`]).

pub mod checks;
pub mod encodings;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod structures;
pub mod training;

pub use error::{Error, Result};
