//! Long-tail dataset curation and augmentation.
//!
//! The pipeline captions existing images of each class, expands the
//! descriptions until every class reaches a per-class cap, generates images
//! for the new descriptions, gates them by embedding similarity to a
//! class feature template (refining and regenerating the ones that fall
//! short), and finally emits mixup samples that pair class-balanced draws
//! from the original data with draws from the generated pool.

pub mod backends;
pub mod dataset;
pub mod error;
pub mod eval;
mod fsutil;
pub mod imaging;
pub mod mix;
pub mod pipeline;
pub mod reflection;
pub mod seed;
pub mod templating;

pub use error::{Error, Result};
