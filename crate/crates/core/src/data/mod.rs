//! Videos, labels, clip sampling, the synthetic corpus and its on-disk form.

pub mod folds;
pub mod labels;
pub mod store;
pub mod synthetic;
pub mod window;

use tas_tensor::Tensor;

use crate::error::{contract, Result};

pub use folds::{make_folds, Fold};
pub use labels::{expand, runs, segments_from_labels, Segment};
pub use store::{ClassMap, Dataset};
pub use synthetic::{generate_synthetic, GeneratorConfig};
pub use window::{sample_windows, Clip, WindowSpec};

/// One untrimmed video: `T×D` frame features and `T` class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub fps: f64,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.features.rows() != self.labels.len() {
            return contract(
                "VideoRecord",
                format!(
                    "{}: {} feature rows but {} labels",
                    self.id,
                    self.features.rows(),
                    self.labels.len()
                ),
            );
        }
        if let Some(&bad) = self.labels.iter().find(|&&c| c >= classes) {
            return contract("VideoRecord", format!("{}: label {bad} outside 0..{classes}", self.id));
        }
        Ok(())
    }
}
