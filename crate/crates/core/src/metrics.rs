//! Frame accuracy, segmental edit score and segmental F1@k.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{runs, Segment};
use crate::error::{contract, Result};

/// Overlap thresholds reported by default, in percent.
pub const F1_THRESHOLDS: [u32; 3] = [10, 25, 50];

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return contract(
            "frame_accuracy",
            format!("prediction has {} frames, ground truth {}", pred.len(), gt.len()),
        );
    }
    if gt.is_empty() {
        return Ok(100.0);
    }
    let hit = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hit as f64 / gt.len() as f64)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

/// Edit score over the ordered segment classes; durations are ignored.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = runs(pred).iter().map(|s| s.class).collect();
    let g: Vec<usize> = runs(gt).iter().map(|s| s.class).collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&p, &g) as f64 / longest as f64)
}

pub fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Segment-level confusion counts at one overlap threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Overlap {
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 100.0;
        }
        if self.tp == 0 {
            return 0.0;
        }
        let precision = self.tp as f64 / (self.tp + self.fp) as f64;
        let recall = self.tp as f64 / (self.tp + self.fn_) as f64;
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

fn candidates(pred: &[Segment], gt: &[Segment], k: f64) -> Vec<Vec<usize>> {
    let threshold = k / 100.0;
    pred.iter()
        .map(|p| {
            (0..gt.len())
                .filter(|&j| gt[j].class == p.class && iou(p, &gt[j]) > threshold)
                .collect()
        })
        .collect()
}

/// Maximum one-to-one matching of predicted to ground-truth segments, where a
/// pair may match when classes agree and IoU strictly exceeds `k/100`.
pub fn overlap_counts(pred: &[usize], gt: &[usize], k: f64) -> Overlap {
    let (p, g) = (runs(pred), runs(gt));
    let edges = candidates(&p, &g, k);
    let mut owner: Vec<Option<usize>> = vec![None; g.len()];

    fn augment(i: usize, edges: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &j in &edges[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|other| augment(other, edges, owner, seen)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }

    let mut tp = 0;
    for i in 0..p.len() {
        let mut seen = vec![false; g.len()];
        if augment(i, &edges, &mut owner, &mut seen) {
            tp += 1;
        }
    }
    Overlap {
        tp,
        fp: p.len() - tp,
        fn_: g.len() - tp,
    }
}

/// The common greedy rule: each predicted segment, in temporal order, takes
/// the unmatched same-class ground-truth segment of highest IoU. It can miss
/// matches that [`overlap_counts`] finds.
pub fn overlap_counts_greedy(pred: &[usize], gt: &[usize], k: f64) -> Overlap {
    let (p, g) = (runs(pred), runs(gt));
    let mut used = vec![false; g.len()];
    let mut tp = 0;
    for s in &p {
        let best = (0..g.len())
            .filter(|&j| !used[j] && g[j].class == s.class)
            .map(|j| (j, iou(s, &g[j])))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((j, v)) = best {
            if v > k / 100.0 {
                used[j] = true;
                tp += 1;
            }
        }
    }
    Overlap {
        tp,
        fp: p.len() - tp,
        fn_: g.len() - tp,
    }
}

pub fn f1_at_k(pred: &[usize], gt: &[usize], k: f64) -> f64 {
    overlap_counts(pred, gt, k).f1()
}

/// Scores in the usual reporting order: F1@{10,25,50}, Edit, Acc.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "f1@10")]
    pub f1_10: f64,
    #[serde(rename = "f1@25")]
    pub f1_25: f64,
    #[serde(rename = "f1@50")]
    pub f1_50: f64,
    pub edit: f64,
    pub acc: f64,
}

impl Scores {
    pub fn f1(&self) -> [f64; 3] {
        [self.f1_10, self.f1_25, self.f1_50]
    }

    pub fn of(pred: &[usize], gt: &[usize]) -> Result<Self> {
        let acc = frame_accuracy(pred, gt)?;
        let [f1_10, f1_25, f1_50] = F1_THRESHOLDS.map(|k| f1_at_k(pred, gt, k as f64));
        Ok(Self {
            f1_10,
            f1_25,
            f1_50,
            edit: edit_score(pred, gt),
            acc,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub id: String,
    pub frames: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: Vec<VideoScores>,
    /// Frame-pooled accuracy; edit and F1 averaged over videos.
    pub corpus: Scores,
}

/// One `(id, prediction, ground truth)` triple per video.
pub fn evaluate_corpus<S: AsRef<str>>(pairs: &[(S, &[usize], &[usize])]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return contract("evaluate_corpus", "no videos to evaluate");
    }
    let mut videos = Vec::with_capacity(pairs.len());
    let (mut hit, mut frames) = (0usize, 0usize);
    for (id, pred, gt) in pairs {
        let scores = Scores::of(pred, gt).map_err(|e| crate::TasError::Contract {
            op: "evaluate_corpus",
            msg: format!("{}: {e}", id.as_ref()),
        })?;
        hit += pred.iter().zip(gt.iter()).filter(|(p, g)| p == g).count();
        frames += gt.len();
        videos.push(VideoScores {
            id: id.as_ref().to_string(),
            frames: gt.len(),
            scores,
        });
    }
    let n = videos.len() as f64;
    let mean = |f: fn(&Scores) -> f64| videos.iter().map(|v| f(&v.scores)).sum::<f64>() / n;
    let corpus = Scores {
        f1_10: mean(|s| s.f1_10),
        f1_25: mean(|s| s.f1_25),
        f1_50: mean(|s| s.f1_50),
        edit: mean(|s| s.edit),
        acc: if frames == 0 { 100.0 } else { 100.0 * hit as f64 / frames as f64 },
    };
    Ok(EvalReport { videos, corpus })
}

/// Aligned plain-text table, one row per `(name, scores)` entry.
pub fn format_table<S: AsRef<str>>(rows: &[(S, Scores)]) -> String {
    let width = rows.iter().map(|(n, _)| n.as_ref().len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "name", "F1@10", "F1@25", "F1@50", "Edit", "Acc"
    );
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}",
            name.as_ref(),
            s.f1_10,
            s.f1_25,
            s.f1_50,
            s.edit,
            s.acc
        );
    }
    out
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut rows: Vec<(&str, Scores)> = self.videos.iter().map(|v| (v.id.as_str(), v.scores)).collect();
        rows.push(("corpus", self.corpus));
        format_table(&rows)
    }
}
