//! Personalized semantic segmentation.
//!
//! A segmentation model is adapted from a labeled source collection to one
//! user's unlabeled images. The user's images are clustered into groups; each
//! training batch comes from a single group and a region-context attention
//! module lets every pixel consult soft class regions pooled from all images of
//! the batch. Adaptation is adversarial on entropy maps, followed by a
//! refinement stage on entropy-selected pseudo labels.

pub mod error;

pub mod data;
pub mod grouping;
pub mod nn;
pub mod context;
pub mod losses;
pub mod networks;
pub mod metrics;
pub mod training;
pub mod pipeline;

pub use error::{Error, Result};
