//! Multimodal multiple-choice reasoning by fusing language-model scores with
//! image-text matching scores over generated images.
//!
//! The crate covers the whole loop: building a synthetic visual QA dataset
//! from knowledge triples, scoring choices, training two small adapters on a
//! frozen backbone with a ranking objective, ensemble inference, and the
//! analysis procedures. Deterministic stub backends make every stage run
//! without pretrained weights.

pub mod backends;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod linalg;
pub mod scoring;
pub mod text;
pub mod training;

pub use error::{Error, Result};
