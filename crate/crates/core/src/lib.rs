//! Concept bottleneck training and auditing on precomputed vision-language
//! embeddings.
//!
//! The crate reads an embedding bundle, scores images against concept text
//! features, trains a residual projection and a linear class head with a
//! contrastive-plus-supervised objective, evaluates the resulting concept and
//! class predictions, and repairs confused class pairs by adding concepts.

pub mod concept_model;
pub mod corpus;
pub mod error;
pub mod intervention;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod reference;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
