//! Decomposed dental plaque segmentation: a shared encoder with separate teeth
//! and plaque decoders, auxiliary boundary and contrastive heads, and the
//! metrics, training loop and tooling around them.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant, clippy::type_complexity)]

pub mod cli;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod presets;
pub mod report;
pub mod synthetic;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
