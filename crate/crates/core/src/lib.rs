//! Weakly-supervised two-stage lesion detector trained on paired
//! positive/negative images.
//!
//! The library covers the full loop at desk scale: synthetic dataset
//! generation, anchor machinery, the top-likelihood and similarity losses,
//! a small trainable detector, and the screening evaluation protocol
//! (mAP plus patient-level sensitivity/specificity/accuracy/AUC).

pub mod anchors;
pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthdata;

mod error;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
