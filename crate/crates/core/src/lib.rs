//! Temporal action segmentation with prompt-supervised frame features, a
//! hierarchical transformer encoder-decoder and boundary-regression
//! calibration.

pub mod ase;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod prc;
pub mod prompts;
pub mod vfe;

pub use error::{Result, TasError};
