//! Multi-rate sliding-window clip sampling.

use serde::{Deserialize, Serialize};

use super::labels::runs;
use super::VideoRecord;
use crate::error::{contract, Result};

pub const WINDOW_LEN: usize = 16;

/// A window of `window_len` frames taken every `ds` frames; consecutive
/// windows start `window_len * ds / ol` frames apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_len: usize,
    pub ds: usize,
    pub ol: usize,
}

impl WindowSpec {
    pub fn new(ds: usize, ol: usize) -> Result<Self> {
        let spec = Self {
            window_len: WINDOW_LEN,
            ds,
            ol,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ds == 0 || self.ol == 0 || self.window_len == 0 {
            return contract("WindowSpec", format!("{self:?}: ds, ol and window_len must be positive"));
        }
        if !self.span().is_multiple_of(self.ol) {
            return contract("WindowSpec", format!("span {} not divisible by ol {}", self.span(), self.ol));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.window_len * self.ds
    }

    pub fn stride(&self) -> usize {
        self.span() / self.ol
    }

    /// Start offsets of every full window in a `frames`-long video.
    pub fn starts(&self, frames: usize) -> Vec<usize> {
        if frames < self.span() {
            return Vec::new();
        }
        (0..=frames - self.span()).step_by(self.stride()).collect()
    }

    pub fn indices(&self, start: usize) -> Vec<usize> {
        (0..self.window_len).map(|j| start + j * self.ds).collect()
    }

    /// Parses `"4:2,8:1,12:1"` (ds:ol pairs).
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(|p| {
                let (ds, ol) = p
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| crate::TasError::Config(format!("window spec {p:?} is not ds:ol")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| crate::TasError::Config(format!("window spec {p:?}: {e}")))
                };
                Self::new(parse(ds)?, parse(ol)?)
            })
            .collect()
    }
}

/// The multi-rate configuration `ds=[4, 8, 12]`, `ol=[2, 1, 1]`.
pub fn default_specs() -> Vec<WindowSpec> {
    [(4, 2), (8, 1), (12, 1)]
        .into_iter()
        .map(|(ds, ol)| WindowSpec::new(ds, ol).expect("valid constants"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub video: String,
    pub spec: WindowSpec,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Classes of the label runs inside the clip, in temporal order.
    pub actions: Vec<usize>,
}

impl Clip {
    pub fn from_indices(video: &VideoRecord, spec: WindowSpec, indices: Vec<usize>) -> Self {
        let labels: Vec<usize> = indices.iter().map(|&i| video.labels[i]).collect();
        let actions = runs(&labels).iter().map(|s| s.class).collect();
        Self {
            video: video.id.clone(),
            spec,
            indices,
            labels,
            actions,
        }
    }

    pub fn action_count(&self) -> usize {
        self.actions.len()
    }
}

/// Every full window of `video` under `spec`; the trailing partial window is
/// dropped. Videos shorter than one span yield nothing (and a warning).
pub fn sample_windows(video: &VideoRecord, spec: &WindowSpec) -> Vec<Clip> {
    let starts = spec.starts(video.len());
    if starts.is_empty() {
        log::warn!(
            "video {} has {} frames, shorter than one {}-frame window span",
            video.id,
            video.len(),
            spec.span()
        );
    }
    starts
        .into_iter()
        .map(|s| Clip::from_indices(video, *spec, spec.indices(s)))
        .collect()
}
