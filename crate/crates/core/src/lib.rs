//! Few-shot joint intent classification and slot filling.
//!
//! The crate bundles a small reverse-mode autodiff engine, a bidirectional
//! recurrent encoder with intent and slot heads, the variable-way /
//! variable-shot episode sampler, three adaptation algorithms (joint
//! prototypical networks, first-order MAML and a fine-tune baseline), span
//! metrics, and the file formats and CLI that tie them together.

pub mod algorithms;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod encoder;
mod error;
pub mod metrics;
pub mod sampler;
pub mod toy;

pub use error::{Error, Result};
