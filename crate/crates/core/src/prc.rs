//! Boundary selection and segment-wise majority calibration.

use crate::data::runs;
use crate::error::{contract, Result};

pub const BOUNDARY_THRESHOLD: f64 = 0.5;

/// Marks peaks of `p` above the threshold. A maximal run of equal values is a
/// peak when both flanking values (where they exist) are lower; only its
/// leftmost frame is marked.
pub fn select_boundaries(p: &[f64]) -> Vec<bool> {
    let t = p.len();
    let mut out = vec![false; t];
    let mut start = 0;
    while start < t {
        let mut end = start + 1;
        while end < t && p[end] == p[start] {
            end += 1;
        }
        let v = p[start];
        let left_ok = start == 0 || p[start - 1] < v;
        let right_ok = end == t || p[end] < v;
        if v > BOUNDARY_THRESHOLD && left_ok && right_ok {
            out[start] = true;
        }
        start = end;
    }
    out
}

/// Splits `[0, T)` at every marked frame after the first; returns the pieces
/// as `[start, end)` ranges. A mark on frame 0 opens the first piece anyway.
pub fn pieces(boundaries: &[bool]) -> Vec<(usize, usize)> {
    let t = boundaries.len();
    if t == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    for s in 1..t {
        if boundaries[s] {
            out.push((start, s));
            start = s;
        }
    }
    out.push((start, t));
    out
}

/// Majority label of `labels`; ties go to the label with the longest run,
/// then to the smallest id.
pub fn majority(labels: &[usize]) -> Option<usize> {
    let classes = labels.iter().max()? + 1;
    let mut count = vec![0usize; classes];
    let mut longest = vec![0usize; classes];
    for &c in labels {
        count[c] += 1;
    }
    for r in runs(labels) {
        longest[r.class] = longest[r.class].max(r.len());
    }
    (0..classes)
        .filter(|&c| count[c] > 0)
        .max_by(|&a, &b| count[a].cmp(&count[b]).then(longest[a].cmp(&longest[b])).then(b.cmp(&a)))
}

/// Reassigns every piece between consecutive boundaries its majority label.
pub fn calibrate(pred: &[usize], boundaries: &[bool]) -> Result<Vec<usize>> {
    if pred.len() != boundaries.len() {
        return contract(
            "calibrate",
            format!("{} predicted frames but {} boundary flags", pred.len(), boundaries.len()),
        );
    }
    let mut out = Vec::with_capacity(pred.len());
    for (s, e) in pieces(boundaries) {
        let label = majority(&pred[s..e]).expect("pieces are non-empty");
        out.extend(std::iter::repeat_n(label, e - s));
    }
    Ok(out)
}

/// Number of pieces `calibrate` produces for these boundaries.
pub fn piece_count(boundaries: &[bool]) -> usize {
    if boundaries.is_empty() {
        0
    } else {
        1 + boundaries[1..].iter().filter(|&&b| b).count()
    }
}
