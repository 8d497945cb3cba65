//! Contrastive representation learning for georeferenced seafloor imagery.
//!
//! Similar pairs come either from two augmentations of one image (SimCLR) or
//! from two different images taken within a depth-weighted distance `r` of
//! each other (GeoCLR). Around the trainer sit the downstream pieces: annotation
//! selection by hierarchical k-means, latent-space classifiers with optional
//! pseudo-label fine-tuning, macro-F1 evaluation, habitat reports, and a
//! synthetic survey generator to exercise all of it.

pub mod augment;
pub mod classify;
pub mod cli;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod evalx;
pub mod geopair;
pub mod nn;
pub mod report;
pub mod rng;
pub mod select;
pub mod surveysim;

pub use error::{Error, Result};
