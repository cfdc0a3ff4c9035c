//! Seeded synthetic corpus with an ordinal workflow of actions.
//!
//! Labels follow a frame-level Markov chain: a frame keeps its class with
//! probability `self_transition`; on leaving, the chain advances to the next
//! class, occasionally skips one or steps back to redo the previous one. A
//! video ends when the last class's segment ends. Features are a per-class
//! Gaussian centroid plus AR(1)-smoothed Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tas_tensor::Tensor;

use super::VideoRecord;
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub videos: usize,
    /// Target mean video length in frames; sets the self-transition probability.
    pub mean_frames: f64,
    pub feature_dim: usize,
    pub centroid_scale: f64,
    /// Stationary standard deviation of the per-dimension noise.
    pub noise_scale: f64,
    /// AR(1) coefficient of the noise, in `[0, 1)`.
    pub noise_smoothing: f64,
    /// Probability of skipping one class when leaving a segment.
    pub skip: f64,
    /// Probability of stepping back to redo the previous class.
    pub repeat: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 15,
            videos: 99,
            mean_frames: 500.0,
            feature_dim: 32,
            centroid_scale: 1.0,
            noise_scale: 1.3,
            noise_smoothing: 0.8,
            skip: 0.03,
            repeat: 0.08,
            fps: 15.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "generate_synthetic";
        if self.classes < 2 {
            return contract(op, format!("need at least 2 classes, got {}", self.classes));
        }
        if self.mean_frames < 2.0 || !self.mean_frames.is_finite() {
            return contract(op, format!("mean_frames must be at least 2, got {}", self.mean_frames));
        }
        if self.feature_dim == 0 {
            return contract(op, "feature_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.noise_smoothing) || self.noise_scale < 0.0 {
            return contract(op, "noise_smoothing must be in [0,1) and noise_scale non-negative");
        }
        if self.skip < 0.0 || self.repeat < 0.0 || self.skip + self.repeat > 1.0 {
            return contract(op, "skip and repeat must be probabilities summing to at most 1");
        }
        let p = self.self_transition();
        if !(0.0..1.0).contains(&p) {
            return contract(
                op,
                format!(
                    "mean_frames {} is below the expected {:.1} segments per video",
                    self.mean_frames,
                    self.expected_segments()
                ),
            );
        }
        Ok(())
    }

    /// Leaving probabilities `(advance, skip, back)` from class `c`.
    fn jumps(&self, c: usize) -> (f64, f64, f64) {
        let last = self.classes - 1;
        let (mut a, mut s, mut r) = (1.0 - self.skip - self.repeat, self.skip, self.repeat);
        if c == 0 {
            a += r;
            r = 0.0;
        }
        if c + 2 > last {
            a += s;
            s = 0.0;
        }
        (a, s, r)
    }

    /// Expected segments per video, from the leave-chain over classes.
    pub fn expected_segments(&self) -> f64 {
        let n = self.classes;
        let mut e = vec![1.0; n];
        // Gauss-Seidel sweeps from the absorbing end converge geometrically.
        for _ in 0..10_000 {
            let mut delta: f64 = 0.0;
            for c in (0..n - 1).rev() {
                let (a, s, r) = self.jumps(c);
                let mut v = 1.0 + a * e[c + 1];
                if s > 0.0 {
                    v += s * e[c + 2];
                }
                if r > 0.0 {
                    v += r * e[c - 1];
                }
                delta = delta.max((v - e[c]).abs());
                e[c] = v;
            }
            if delta < 1e-12 {
                break;
            }
        }
        e[0]
    }

    pub fn self_transition(&self) -> f64 {
        1.0 - self.expected_segments() / self.mean_frames
    }
}

/// Deterministic per-seed corpus, plus the class centroids used to build it.
pub struct SyntheticCorpus {
    pub videos: Vec<VideoRecord>,
    pub centroids: Tensor,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate_synthetic(config: &GeneratorConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let d = config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centroids: Vec<f64> = (0..config.classes * d)
        .map(|_| config.centroid_scale * normal(&mut rng))
        .collect();
    let centroids = Tensor::new(vec![config.classes, d], centroids)?;
    let videos = (0..config.videos)
        .map(|i| generate_video(config, &centroids, i))
        .collect::<Result<_>>()?;
    Ok(SyntheticCorpus { videos, centroids })
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:03}")
}

fn generate_video(config: &GeneratorConfig, centroids: &Tensor, index: usize) -> Result<VideoRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let stay = config.self_transition();
    let last = config.classes - 1;

    let mut labels = vec![0usize];
    loop {
        let c = *labels.last().expect("non-empty");
        if rng.random::<f64>() < stay {
            labels.push(c);
            continue;
        }
        if c == last {
            break;
        }
        let (a, s, _) = config.jumps(c);
        let u: f64 = rng.random();
        let next = if u < a {
            c + 1
        } else if u < a + s {
            c + 2
        } else {
            c - 1
        };
        labels.push(next);
    }

    let d = config.feature_dim;
    let rho = config.noise_smoothing;
    let innovation = config.noise_scale * (1.0 - rho * rho).sqrt();
    let mut noise: Vec<f64> = (0..d).map(|_| config.noise_scale * normal(&mut rng)).collect();
    let mut data = Vec::with_capacity(labels.len() * d);
    for &c in &labels {
        for (k, n) in noise.iter_mut().enumerate() {
            // Stored as f32 on disk; rounding here keeps files lossless.
            data.push((centroids.get2(c, k) + *n) as f32 as f64);
            *n = rho * *n + innovation * normal(&mut rng);
        }
    }
    Ok(VideoRecord {
        id: video_id(index),
        features: Tensor::new(vec![labels.len(), d], data)?,
        labels,
        fps: config.fps,
    })
}

/// Frame accuracy of assigning each frame to its nearest centroid.
pub fn nearest_centroid_accuracy(videos: &[VideoRecord], centroids: &Tensor) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for v in videos {
        for (t, &label) in v.labels.iter().enumerate() {
            let x = v.features.row(t);
            let best = (0..centroids.rows())
                .map(|c| {
                    let d: f64 = x.iter().zip(centroids.row(c)).map(|(a, b)| (a - b).powi(2)).sum();
                    (c, d)
                })
                .fold((0, f64::INFINITY), |acc, cd| if cd.1 < acc.1 { cd } else { acc })
                .0;
            hit += usize::from(best == label);
            total += 1;
        }
    }
    100.0 * hit as f64 / total.max(1) as f64
}
