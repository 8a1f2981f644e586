//! Budgeted active learning that mixes exact fine-grained human labels with
//! cheap, noisy coarse-grained labels from a weak annotator.
//!
//! The pieces, bottom up:
//!
//! - [`label`]: label hierarchy, datasets, partitions, synthetic data.
//! - [`annotators`]: human oracle, simulated weak annotator, external protocol.
//! - [`noise`]: transition-matrix estimation and the forward-corrected loss.
//! - [`classifier`]: the two-head classifier and its trainer.
//! - [`acquisition`]: baseline selectors and the cost-aware allocator.
//! - [`harness`]: the multi-round experiment loop.
//! - [`report`]: configuration files, CSV/SVG outputs and the command layer.

pub mod acquisition;
pub mod annotators;
pub mod classifier;
pub mod error;
pub mod harness;
pub mod label;
pub mod math;
pub mod noise;
pub mod rational;
pub mod report;

pub use error::{Error, Result};
