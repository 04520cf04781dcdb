//! Bi-temporal change detection with a small early-fusion FCN, a logit-based
//! scene confidence indicator, and an unsupervised CVA fallback.

pub mod confidence;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unsup;

pub use error::{Error, Result};
