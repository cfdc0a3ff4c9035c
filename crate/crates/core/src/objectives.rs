//! Segmentation and boundary losses.

use serde::{Deserialize, Serialize};
use tas_tensor::{Tape, Tensor, Var};

use crate::error::{contract, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the smoothing term inside each stage.
    pub lambda: f64,
    /// Weight of the boundary loss in the total.
    pub mu: f64,
    /// Bandwidth of the feature-similarity kernel.
    pub sigma: f64,
    /// Truncation of the log-probability differences.
    pub tau: f64,
    /// Half-width of the positive band around each ground-truth boundary.
    pub boundary_radius: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            mu: 1.0,
            sigma: 1.0,
            tau: 4.0,
            boundary_radius: 0,
        }
    }
}

/// `median(freq) / freq_c` over classes that occur; absent classes get 1.
pub fn median_frequency_weights<'a>(labels: impl IntoIterator<Item = &'a [usize]>, classes: usize) -> Result<Vec<f64>> {
    let mut count = vec![0usize; classes];
    for seq in labels {
        for &c in seq {
            if c >= classes {
                return contract("median_frequency_weights", format!("label {c} outside 0..{classes}"));
            }
            count[c] += 1;
        }
    }
    let mut present: Vec<f64> = count.iter().filter(|&&n| n > 0).map(|&n| n as f64).collect();
    if present.is_empty() {
        return contract("median_frequency_weights", "no training frames");
    }
    present.sort_by(f64::total_cmp);
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2]
    } else {
        0.5 * (present[m / 2 - 1] + present[m / 2])
    };
    Ok(count.iter().map(|&n| if n == 0 { 1.0 } else { median / n as f64 }).collect())
}

/// Positive-class weight `total / positives` of the boundary targets.
pub fn positive_weight<'a>(targets: impl IntoIterator<Item = &'a [f64]>) -> Result<f64> {
    let (mut total, mut pos) = (0.0, 0.0);
    for y in targets {
        total += y.len() as f64;
        pos += y.iter().sum::<f64>();
    }
    if pos == 0.0 {
        return contract("positive_weight", "no positive boundary frames");
    }
    Ok(total / pos)
}

fn similarity_kernel(features: &Tensor, sigma: f64) -> Tensor {
    let t = features.rows();
    let data = (1..t)
        .map(|s| {
            let d2: f64 = features
                .row(s)
                .iter()
                .zip(features.row(s - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Tensor::new(vec![t.saturating_sub(1), 1], data).expect("length matches")
}

/// Similarity-weighted truncated MSE on adjacent-frame log-probabilities
/// `logp: T×C`, normalised by `T·C`.
pub fn gs_tmse_logp(tape: &mut Tape, logp: Var, features: &Tensor, sigma: f64, tau: f64) -> Result<Var> {
    let (t, c) = tape.value(logp).dims2();
    if t < 2 {
        return contract("gs_tmse", format!("need at least 2 frames, got {t}"));
    }
    if features.rows() != t {
        return contract("gs_tmse", format!("{} feature rows for {t} frames", features.rows()));
    }
    let next = tape.slice_rows(logp, 1, t)?;
    let prev = tape.slice_rows(logp, 0, t - 1)?;
    let diff = tape.sub(next, prev)?;
    let mag = tape.abs(diff);
    let delta = tape.clamp(mag, 0.0, tau);
    let sq = tape.square(delta);
    let kernel = tape.constant(similarity_kernel(features, sigma));
    let weighted = tape.mul_col(sq, kernel)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / (t * c) as f64))
}

pub fn gs_tmse(tape: &mut Tape, logits: Var, features: &Tensor, sigma: f64, tau: f64) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    gs_tmse_logp(tape, logp, features, sigma, tau)
}

/// Class-weighted cross-entropy averaged over frames.
pub fn weighted_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let (t, c) = tape.value(logits).dims2();
    if labels.len() != t {
        return contract("cross_entropy", format!("{} labels for {t} frames", labels.len()));
    }
    if weights.len() != c {
        return contract("cross_entropy", format!("{} class weights for {c} classes", weights.len()));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, labels)?;
    let w = Tensor::new(vec![t, 1], labels.iter().map(|&y| weights[y]).collect())?;
    let w = tape.constant(w);
    let weighted = tape.mul_col(picked, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / t as f64))
}

/// Weighted logistic loss of boundary probabilities against 0/1 targets.
pub fn boundary_logistic(tape: &mut Tape, probs: Var, targets: &[f64], w_pos: f64) -> Result<Var> {
    let t = tape.value(probs).len();
    if targets.len() != t {
        return contract("boundary_regression_loss", format!("{} targets for {t} frames", targets.len()));
    }
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let shape = tape.value(p).shape().to_vec();
    let log_p = tape.log(p);
    let one_minus = {
        let neg = tape.scale(p, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    let log_q = tape.log(one_minus);
    let y_pos = tape.constant(Tensor::new(shape.clone(), targets.iter().map(|y| w_pos * y).collect())?);
    let y_neg = tape.constant(Tensor::new(shape, targets.iter().map(|y| 1.0 - y).collect())?);
    let a = tape.mul(log_p, y_pos)?;
    let b = tape.mul(log_q, y_neg)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, -1.0 / t as f64))
}

/// Boundary loss averaged over stages; `probs` are per-stage `T×1` values.
pub fn boundary_regression_loss(tape: &mut Tape, probs: &[Var], targets: &[f64], w_pos: f64) -> Result<(Var, Vec<f64>)> {
    let mut terms = Vec::with_capacity(probs.len());
    for &p in probs {
        terms.push(boundary_logistic(tape, p, targets, w_pos)?);
    }
    let values = terms.iter().map(|&v| tape.value(v).item()).collect();
    Ok((mean_of(tape, &terms)?, values))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return contract("loss", "no stages");
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub classification: f64,
    pub smoothing: f64,
    pub boundary: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stages: Vec<StageLoss>,
    /// Mean over stages of `classification + lambda * smoothing`.
    pub action: f64,
    /// Mean over stages of the boundary term.
    pub boundary: f64,
    pub total: f64,
}

impl LossReport {
    /// Frame-count-free average of several reports (e.g. one epoch).
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let g = reports.first().map_or(0, |r| r.stages.len());
        let mut out = LossReport {
            stages: vec![StageLoss::default(); g],
            ..Default::default()
        };
        for r in reports {
            out.action += r.action / n;
            out.boundary += r.boundary / n;
            out.total += r.total / n;
            for (o, s) in out.stages.iter_mut().zip(&r.stages) {
                o.classification += s.classification / n;
                o.smoothing += s.smoothing / n;
                o.boundary += s.boundary / n;
            }
        }
        out
    }
}

/// Mean over stages of class-weighted cross-entropy plus `lambda` times
/// the smoothing loss. Returns the loss and per-stage `(cls, smo)` values.
pub fn action_segmentation_loss(
    tape: &mut Tape,
    stages: &[Var],
    labels: &[usize],
    weights: &[f64],
    features: &Tensor,
    cfg: &LossConfig,
) -> Result<(Var, Vec<(f64, f64)>)> {
    let mut terms = Vec::with_capacity(stages.len());
    let mut parts = Vec::with_capacity(stages.len());
    for &logits in stages {
        let cls = weighted_cross_entropy(tape, logits, labels, weights)?;
        let smo = if labels.len() >= 2 {
            gs_tmse(tape, logits, features, cfg.sigma, cfg.tau)?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        parts.push((tape.value(cls).item(), tape.value(smo).item()));
        let weighted = tape.scale(smo, cfg.lambda);
        terms.push(tape.add(cls, weighted)?);
    }
    Ok((mean_of(tape, &terms)?, parts))
}

/// `L_as + mu * L_br`, with an itemised report.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    seg_stages: &[Var],
    boundary_probs: &[Var],
    labels: &[usize],
    boundary_targets: &[f64],
    weights: &[f64],
    w_pos: f64,
    features: &Tensor,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    let (las, parts) = action_segmentation_loss(tape, seg_stages, labels, weights, features, cfg)?;
    let (lbr, bparts) = boundary_regression_loss(tape, boundary_probs, boundary_targets, w_pos)?;
    let scaled = tape.scale(lbr, cfg.mu);
    let total = tape.add(las, scaled)?;
    let g = parts.len().max(bparts.len());
    let stages = (0..g)
        .map(|i| StageLoss {
            classification: parts.get(i).map_or(0.0, |p| p.0),
            smoothing: parts.get(i).map_or(0.0, |p| p.1),
            boundary: bparts.get(i).copied().unwrap_or(0.0),
        })
        .collect();
    let report = LossReport {
        stages,
        action: tape.value(las).item(),
        boundary: tape.value(lbr).item(),
        total: tape.value(total).item(),
    };
    Ok((total, report))
}
