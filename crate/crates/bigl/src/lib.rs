//! Bidirectional global-to-local unsupervised domain adaptation for
//! cross-modality medical image segmentation.
//!
//! The crate trains a segmentation backbone on a labeled source modality and
//! adapts it to an unlabeled target modality by combining bidirectional image
//! synthesis with global (output/feature) and local (attention-map) alignment.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod domain;
pub mod error;
pub mod eval;
pub mod gtl;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;
pub mod segnet;
pub mod synthesis;
pub mod trainer;

pub use error::{BiglError, Result};
