//! Cross-denoising peer training for segmentation under domain shift and corrupted
//! labels.
//!
//! Two heterogeneous peer segmenters select small-loss source samples for
//! each other, learn from suspected-noisy masks through a boundary-weighted
//! loss, adapt to an unlabeled target domain with an entropy-weighted
//! adversarial term, and exchange class-wise confident pseudo labels.

pub mod datamodel;
pub mod error;
pub mod evalcli;
pub mod geometry;
pub mod labelnoise;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod pseudolabel;
pub mod rng;
pub mod selection;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
