//! Teacher-student domain alignment for paired two-modality image
//! classification.
//!
//! A student feature extractor for the weak modality (white-light
//! colonoscopy) is trained so that its features are adversarially
//! indistinguishable from a frozen teacher's strong-modality (NBI)
//! features, and contrastively closer to them (KL over classifier-head
//! distributions) than to an unaligned weak-modality baseline's
//! features. Inference uses the weak modality alone.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod nn;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
