//! Exhaustive reference implementations of the segmental metrics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tas_core::data::{runs, Segment};

/// Random labelling of length `t` with at most `max_segs` runs over `classes`.
pub fn random_labels(rng: &mut ChaCha8Rng, t: usize, max_segs: usize, classes: usize) -> Vec<usize> {
    let segs = rng.random_range(1..=max_segs.min(t));
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < segs - 1 {
        let c = rng.random_range(1..t);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort();
    cuts.push(t);
    let mut out = Vec::with_capacity(t);
    let mut prev = usize::MAX;
    let mut start = 0;
    for end in cuts {
        let mut c = rng.random_range(0..classes);
        while c == prev {
            c = rng.random_range(0..classes);
        }
        out.extend(std::iter::repeat_n(c, end - start));
        prev = c;
        start = end;
    }
    out
}

pub fn levenshtein_oracle(a: &[usize], b: &[usize]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = levenshtein_oracle(ra, rb) + usize::from(x != y);
            let del = levenshtein_oracle(ra, b) + 1;
            let ins = levenshtein_oracle(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

pub fn edit_oracle(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = runs(pred).iter().map(|s| s.class).collect();
    let g: Vec<usize> = runs(gt).iter().map(|s| s.class).collect();
    100.0 * (1.0 - levenshtein_oracle(&p, &g) as f64 / p.len().max(g.len()) as f64)
}

/// Tries every partial assignment of predicted to ground-truth segments.
fn best_matching(p: &[Segment], g: &[Segment], used: &mut Vec<bool>, i: usize, k: f64) -> usize {
    if i == p.len() {
        return 0;
    }
    let mut best = best_matching(p, g, used, i + 1, k);
    for j in 0..g.len() {
        if !used[j] && g[j].class == p[i].class {
            let inter = p[i].end.min(g[j].end).saturating_sub(p[i].start.max(g[j].start));
            let union = p[i].len() + g[j].len() - inter;
            if inter as f64 / union as f64 > k / 100.0 {
                used[j] = true;
                best = best.max(1 + best_matching(p, g, used, i + 1, k));
                used[j] = false;
            }
        }
    }
    best
}

pub fn f1_oracle(pred: &[usize], gt: &[usize], k: f64) -> f64 {
    let (p, g) = (runs(pred), runs(gt));
    let tp = best_matching(&p, &g, &mut vec![false; g.len()], 0, k);
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / p.len() as f64;
    let recall = tp as f64 / g.len() as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}
