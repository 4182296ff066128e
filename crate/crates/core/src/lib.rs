//! Whole-slide tiling, tissue filtering, training-view augmentation and
//! frozen-feature evaluation (linear probing and attention-pooling MIL) for
//! histopathology patch encoders.
//!
//! The pipeline runs in stages that communicate through small, stable file
//! formats:
//!
//! 1. [`slide_io`] opens flat rasters or pyramid directories.
//! 2. [`tissue`] computes an Otsu tissue mask on a thumbnail and emits a
//!    [`tissue::PatchManifest`] of foreground patches.
//! 3. [`augment`] implements rotation, flips, color jitter and stain
//!    re-normalization toward randomly sampled templates.
//! 4. [`embed`] stores patch features in `.hemb` files and assembles MIL bags.
//! 5. [`nn`] holds the trainable heads and optimizers, [`eval`] the two
//!    evaluation protocols, metrics and report emission.

pub mod augment;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod json;
pub mod nn;
pub mod rng;
pub mod slide_io;
pub mod synth;
pub mod tissue;

pub use error::{Error, Result};
pub use rng::Rng;
pub use slide_io::{RgbImage, Slide};

/// Version string written into artifact headers.
pub const TOOL_VERSION: &str = concat!("pathbench ", env!("CARGO_PKG_VERSION"));
