//! Frame-wise labels and their run-length segment view.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// A maximal run of frames `[start, end)` sharing one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

pub fn segments_from_labels(labels: &[usize]) -> Result<Vec<Segment>> {
    if labels.is_empty() {
        return contract("segments_from_labels", "empty label sequence");
    }
    Ok(runs(labels))
}

/// Run-length view; empty input gives no segments.
pub fn runs(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.class == c => s.end = t + 1,
            _ => out.push(Segment {
                class: c,
                start: t,
                end: t + 1,
            }),
        }
    }
    out
}

pub fn expand(segments: &[Segment]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.class, s.len()))
        .collect()
}

pub fn count_runs(labels: &[usize]) -> usize {
    if labels.is_empty() {
        return 0;
    }
    1 + labels.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Boundary targets: 1 at frame 0 and wherever the label changes, optionally
/// widened by `radius` frames on each side of an interior transition.
pub fn boundary_targets(labels: &[usize], radius: usize) -> Vec<f64> {
    let t = labels.len();
    let mut y = vec![0.0; t];
    for s in 0..t {
        if s == 0 || labels[s] != labels[s - 1] {
            let lo = if s == 0 { 0 } else { s.saturating_sub(radius) };
            let hi = if s == 0 { 1 } else { (s + radius + 1).min(t) };
            y[lo..hi].iter_mut().for_each(|v| *v = 1.0);
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(class: usize, start: usize, end: usize) -> Segment {
        Segment { class, start, end }
    }

    #[test]
    fn run_length_examples() {
        assert_eq!(segments_from_labels(&[0, 0, 0]).unwrap(), vec![seg(0, 0, 3)]);
        assert_eq!(
            segments_from_labels(&[0, 0, 1, 1, 0]).unwrap(),
            vec![seg(0, 0, 2), seg(1, 2, 4), seg(0, 4, 5)]
        );
        assert!(segments_from_labels(&[]).is_err());
    }

    #[test]
    fn boundary_positives_equal_segment_count() {
        let labels = [3, 3, 1, 1, 1, 4, 3, 3];
        let y = boundary_targets(&labels, 0);
        assert_eq!(y, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(y.iter().sum::<f64>() as usize, count_runs(&labels));
        let wide = boundary_targets(&labels, 1);
        assert_eq!(wide, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn expand_inverts_run_length(labels in prop::collection::vec(0usize..4, 1..100)) {
            let segs = segments_from_labels(&labels).unwrap();
            prop_assert_eq!(expand(&segs), labels.clone());
            prop_assert_eq!(segs.len(), count_runs(&labels));
            prop_assert!(segs.windows(2).all(|w| w[0].class != w[1].class && w[0].end == w[1].start));
        }
    }
}
