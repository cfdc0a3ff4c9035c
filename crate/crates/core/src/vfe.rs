//! Prompt-supervised clip encoder used as a frame feature extractor.
//!
//! A vision encoder reads a 16-frame clip together with `K` ordinal slot
//! tokens and one count token; a text encoder embeds prompts. Slot `i` is
//! pulled towards the semantic prompt of the clip's `i`-th action, the mean
//! of the used slots towards the integrated prompt and the count token
//! towards the statistical prompt, each through a symmetric KL contrastive
//! loss over the batch. After training, the frame tokens become features.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tas_tensor::nn::{Embedding, LayerNorm, Linear};
use tas_tensor::{AdamW, AdamWConfig, ParamId, ParamStore, Tape, Tensor, Var};

use crate::ase::Attention;
use crate::data::window::WINDOW_LEN;
use crate::data::{sample_windows, ClassMap, Clip, VideoRecord, WindowSpec};
use crate::error::{contract, Result, TasError};
use crate::prompts::{render_prompts, PromptKind, PromptRecord, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VfeConfig {
    pub width: usize,
    pub vision_blocks: usize,
    pub text_blocks: usize,
    /// Number of ordinal slot tokens `K`.
    pub slots: usize,
    pub temperature: f64,
    /// Longest token sequence the text encoder accepts; longer prompts are
    /// truncated.
    pub max_text_len: usize,
    /// `ds:ol` pairs of the clip sampler.
    pub windows: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Include the integrated-prompt term.
    pub integrated: bool,
    /// Include the statistical-prompt term.
    pub statistical: bool,
}

impl Default for VfeConfig {
    fn default() -> Self {
        Self {
            width: 32,
            vision_blocks: 2,
            text_blocks: 2,
            slots: 4,
            temperature: 0.07,
            max_text_len: 160,
            windows: "4:2,8:1,12:1".into(),
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            integrated: true,
            statistical: true,
        }
    }
}

impl VfeConfig {
    pub fn window_specs(&self) -> Result<Vec<WindowSpec>> {
        WindowSpec::parse_list(&self.windows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.slots == 0 || self.batch_size == 0 || self.max_text_len == 0 {
            return Err(TasError::Config("vfe width, slots, batch_size and max_text_len must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(TasError::Config("vfe temperature must be positive".into()));
        }
        self.window_specs().map(|_| ())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return contract("cosine", format!("dimensions {} and {} differ", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return contract("cosine", "zero vector");
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `B×B` matrix of cosines between rows of `zc` and rows of `zt`.
pub fn batch_similarity(tape: &mut Tape, zc: Var, zt: Var) -> Result<Var> {
    let (bc, bt) = (tape.value(zc).rows(), tape.value(zt).rows());
    if bc != bt {
        return contract("batch_similarity", format!("batch sizes {bc} and {bt} differ"));
    }
    let nc = tape.normalize_rows(zc)?;
    let nt = tape.normalize_rows(zt)?;
    let ntt = tape.transpose(nt)?;
    Ok(tape.matmul(nc, ntt)?)
}

fn kl_rows(tape: &mut Tape, s: Var, target: &Tensor, temperature: f64) -> Result<Var> {
    let (r, c) = tape.value(s).dims2();
    if target.dims2() != (r, c) {
        return contract("kl_contrastive_loss", format!("target {:?} for similarity {r}x{c}", target.shape()));
    }
    let mut p = target.clone();
    let mut entropy_part = 0.0;
    for i in 0..r {
        let row = &mut p.data_mut()[i * c..(i + 1) * c];
        let total: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0) || total <= 0.0 {
            return contract("kl_contrastive_loss", format!("target row {i} is not a non-negative, non-zero row"));
        }
        for v in row.iter_mut() {
            *v /= total;
            if *v > 0.0 {
                entropy_part += *v * v.ln();
            }
        }
    }
    let scaled = tape.scale(s, 1.0 / temperature);
    let logq = tape.log_softmax(scaled)?;
    let pv = tape.constant(p);
    let cross = tape.mul(logq, pv)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0);
    let kl = tape.add_scalar(neg, entropy_part);
    Ok(tape.scale(kl, 1.0 / r as f64))
}

/// `½[KL(GT‖softmax(S_C/t)) + KL(GTᵀ‖softmax(S_T/t))]` with row-normalised
/// targets, averaged over rows. `s_t` is the text-to-video direction.
pub fn kl_contrastive_loss(tape: &mut Tape, s_c: Var, s_t: Var, gt: &Tensor, temperature: f64) -> Result<Var> {
    let a = kl_rows(tape, s_c, gt, temperature)?;
    let b = kl_rows(tape, s_t, &gt.transpose2(), temperature)?;
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, 0.5))
}

/// Pre-norm transformer block with full single-head self-attention.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: Attention,
    pub norm2: LayerNorm,
    pub hidden: Linear,
    pub out: Linear,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            attention: Attention::new(store, &format!("{name}.attention"), width, width, false, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            hidden: Linear::new(store, &format!("{name}.hidden"), width, 2 * width, rng),
            out: Linear::new(store, &format!("{name}.out"), 2 * width, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let len = tape.value(x).rows();
        let n = self.norm1.forward(tape, store, x)?;
        let a = self.attention.forward(tape, store, n, None, len)?;
        let x = tape.add(x, a)?;
        let n = self.norm2.forward(tape, store, x)?;
        let h = self.hidden.forward(tape, store, n)?;
        let h = tape.relu(h);
        let y = self.out.forward(tape, store, h)?;
        Ok(tape.add(x, y)?)
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub input: Linear,
    pub slots: ParamId,
    pub count: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

/// Encoder outputs for one clip.
#[derive(Clone, Copy, Debug)]
pub struct ClipOutput {
    /// `16×D` frame embeddings.
    pub frames: Var,
    /// `K×D` ordinal slot embeddings.
    pub slots: Var,
    /// `1×D` count embedding.
    pub count: Var,
}

impl VisionEncoder {
    fn new(store: &mut ParamStore, input_dim: usize, cfg: &VfeConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width;
        let tokens = WINDOW_LEN + cfg.slots + 1;
        Self {
            input: Linear::new(store, "vfe.vision.input", input_dim, d, rng),
            slots: store.add_uniform("vfe.vision.slots", &[cfg.slots, d], d, rng),
            count: store.add_uniform("vfe.vision.count", &[1, d], d, rng),
            position: store.add_uniform("vfe.vision.position", &[tokens, d], d, rng),
            blocks: (0..cfg.vision_blocks)
                .map(|i| TransformerBlock::new(store, &format!("vfe.vision.block{i}"), d, rng))
                .collect(),
            norm: LayerNorm::new(store, "vfe.vision.norm", d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, clip: &Tensor) -> Result<ClipOutput> {
        let frames = clip.rows();
        if frames != WINDOW_LEN {
            return contract("vision_encoder", format!("clip has {frames} frames, expected {WINDOW_LEN}"));
        }
        let x = tape.constant(clip.clone());
        let f = self.input.forward(tape, store, x)?;
        let slots = tape.param(store, self.slots);
        let count = tape.param(store, self.count);
        let k = tape.value(slots).rows();
        let tokens = tape.concat_rows(&[f, slots, count])?;
        let pos = tape.param(store, self.position);
        let mut h = tape.add(tokens, pos)?;
        for b in &self.blocks {
            h = b.forward(tape, store, h)?;
        }
        let h = self.norm.forward(tape, store, h)?;
        Ok(ClipOutput {
            frames: tape.slice_rows(h, 0, frames)?,
            slots: tape.slice_rows(h, frames, frames + k)?,
            count: tape.slice_rows(h, frames + k, frames + k + 1)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: Embedding,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl TextEncoder {
    fn new(store: &mut ParamStore, vocab: usize, cfg: &VfeConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width;
        Self {
            embedding: Embedding::new(store, "vfe.text.embedding", vocab, d, rng),
            position: store.add_uniform("vfe.text.position", &[cfg.max_text_len, d], d, rng),
            blocks: (0..cfg.text_blocks)
                .map(|i| TransformerBlock::new(store, &format!("vfe.text.block{i}"), d, rng))
                .collect(),
            norm: LayerNorm::new(store, "vfe.text.norm", d),
        }
    }

    /// Mean-pooled `1×D` embedding of a token sequence.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        let pos = tape.param(store, self.position);
        let max = tape.value(pos).rows();
        let tokens = &tokens[..tokens.len().min(max)];
        if tokens.is_empty() {
            return contract("text_encoder", "empty prompt");
        }
        let e = self.embedding.forward(tape, store, tokens)?;
        let pos = tape.slice_rows(pos, 0, tokens.len())?;
        let mut h = tape.add(e, pos)?;
        for b in &self.blocks {
            h = b.forward(tape, store, h)?;
        }
        let h = self.norm.forward(tape, store, h)?;
        Ok(tape.mean_axis(h, 0)?)
    }
}

/// A training clip: its frame features and rendered prompts.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub features: Tensor,
    pub actions: Vec<usize>,
    pub prompts: Vec<PromptRecord>,
}

impl ClipSample {
    fn prompt(&self, kind: PromptKind, position: Option<usize>) -> &PromptRecord {
        self.prompts
            .iter()
            .find(|p| p.kind == kind && p.position == position)
            .expect("render_prompts emits every kind")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VfeLossReport {
    /// One term per slot that had at least one clip.
    pub semantic: Vec<f64>,
    pub integrated: f64,
    pub statistical: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Vfe {
    pub config: VfeConfig,
    pub classes: ClassMap,
    pub vocab: Vocab,
    pub input_dim: usize,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
}

fn same_text_matrix(texts: &[&str]) -> Tensor {
    let b = texts.len();
    let data = (0..b * b)
        .map(|k| f64::from(u8::from(texts[k / b] == texts[k % b])))
        .collect();
    Tensor::new(vec![b, b], data).expect("square")
}

impl Vfe {
    pub fn new(
        store: &mut ParamStore,
        classes: &ClassMap,
        input_dim: usize,
        config: &VfeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::build(classes, 64);
        Ok(Self {
            vision: VisionEncoder::new(store, input_dim, config, rng),
            text: TextEncoder::new(store, vocab.len(), config, rng),
            config: config.clone(),
            classes: classes.clone(),
            vocab,
            input_dim,
        })
    }

    pub fn sample(&self, video: &VideoRecord, clip: &Clip) -> ClipSample {
        let mut features = Tensor::zeros(&[clip.indices.len(), video.feature_dim()]);
        let d = video.feature_dim();
        for (r, &i) in clip.indices.iter().enumerate() {
            features.data_mut()[r * d..(r + 1) * d].copy_from_slice(video.features.row(i));
        }
        ClipSample {
            features,
            actions: clip.actions.clone(),
            prompts: render_prompts(clip, &self.classes, &self.vocab),
        }
    }

    /// Every clip of every video under the configured window specs.
    pub fn samples(&self, videos: &[VideoRecord]) -> Result<Vec<ClipSample>> {
        let specs = self.config.window_specs()?;
        let mut out = Vec::new();
        for v in videos {
            for spec in &specs {
                out.extend(sample_windows(v, spec).iter().map(|c| self.sample(v, c)));
            }
        }
        Ok(out)
    }

    /// The contrastive objective of one batch.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[ClipSample]) -> Result<(Var, VfeLossReport)> {
        if batch.is_empty() {
            return contract("vfe_total_loss", "empty batch");
        }
        let outputs = batch
            .iter()
            .map(|s| self.vision.forward(tape, store, &s.features))
            .collect::<Result<Vec<_>>>()?;
        let mut text_cache: HashMap<String, Var> = HashMap::new();
        let mut embed = |tape: &mut Tape, p: &PromptRecord| -> Result<Var> {
            if let Some(&v) = text_cache.get(&p.text) {
                return Ok(v);
            }
            let v = self.text.forward(tape, store, &p.tokens)?;
            text_cache.insert(p.text.clone(), v);
            Ok(v)
        };

        let temp = self.config.temperature;
        let k = self.config.slots;
        let mut terms = Vec::new();
        let mut report = VfeLossReport::default();

        for slot in 0..k {
            let members: Vec<usize> = (0..batch.len()).filter(|&b| batch[b].actions.len() > slot).collect();
            if members.is_empty() {
                continue;
            }
            let mut zc = Vec::new();
            let mut zt = Vec::new();
            let mut texts = Vec::new();
            for &b in &members {
                zc.push(tape.slice_rows(outputs[b].slots, slot, slot + 1)?);
                let p = batch[b].prompt(PromptKind::Semantic, Some(slot + 1));
                zt.push(embed(tape, p)?);
                texts.push(p.text.as_str());
            }
            let term = self.pair_loss(tape, &zc, &zt, &texts, temp)?;
            report.semantic.push(tape.value(term).item());
            terms.push(term);
        }

        if self.config.integrated {
            let mut zc = Vec::new();
            let mut zt = Vec::new();
            let mut texts = Vec::new();
            for (b, s) in batch.iter().enumerate() {
                let used = s.actions.len().clamp(1, k);
                let head = tape.slice_rows(outputs[b].slots, 0, used)?;
                zc.push(tape.mean_axis(head, 0)?);
                let p = s.prompt(PromptKind::Integrated, None);
                zt.push(embed(tape, p)?);
                texts.push(p.text.as_str());
            }
            let term = self.pair_loss(tape, &zc, &zt, &texts, temp)?;
            report.integrated = tape.value(term).item();
            terms.push(term);
        }

        if self.config.statistical {
            let mut zc = Vec::new();
            let mut zt = Vec::new();
            let mut texts = Vec::new();
            for (b, s) in batch.iter().enumerate() {
                zc.push(outputs[b].count);
                let p = s.prompt(PromptKind::Statistical, None);
                zt.push(embed(tape, p)?);
                texts.push(p.text.as_str());
            }
            let term = self.pair_loss(tape, &zc, &zt, &texts, temp)?;
            report.statistical = tape.value(term).item();
            terms.push(term);
        }

        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        report.total = tape.value(total).item();
        Ok((total, report))
    }

    fn pair_loss(&self, tape: &mut Tape, zc: &[Var], zt: &[Var], texts: &[&str], temp: f64) -> Result<Var> {
        let zc = tape.concat_rows(zc)?;
        let zt = tape.concat_rows(zt)?;
        let s_c = batch_similarity(tape, zc, zt)?;
        let s_t = batch_similarity(tape, zt, zc)?;
        kl_contrastive_loss(tape, s_c, s_t, &same_text_matrix(texts), temp)
    }

    /// Clip-to-prompt retrieval in batches of `batch_size`: the fraction of
    /// clips whose most similar prompt of `kind` in the batch has the same
    /// text as their own. Semantic retrieval uses the first slot and the
    /// first action's prompt.
    pub fn retrieval_accuracy(&self, store: &ParamStore, samples: &[ClipSample], kind: PromptKind) -> Result<f64> {
        if samples.is_empty() {
            return contract("retrieval_accuracy", "no clips");
        }
        let mut correct = 0usize;
        for batch in samples.chunks(self.config.batch_size) {
            let mut tape = Tape::new();
            let mut zc = Vec::new();
            let mut zt = Vec::new();
            let mut texts = Vec::new();
            for s in batch {
                let out = self.vision.forward(&mut tape, store, &s.features)?;
                let p = match kind {
                    PromptKind::Integrated => {
                        let used = s.actions.len().clamp(1, self.config.slots);
                        let head = tape.slice_rows(out.slots, 0, used)?;
                        zc.push(tape.mean_axis(head, 0)?);
                        s.prompt(PromptKind::Integrated, None)
                    }
                    PromptKind::Statistical => {
                        zc.push(out.count);
                        s.prompt(PromptKind::Statistical, None)
                    }
                    PromptKind::Semantic | PromptKind::Ordinal => {
                        zc.push(tape.slice_rows(out.slots, 0, 1)?);
                        s.prompt(PromptKind::Semantic, Some(1))
                    }
                };
                zt.push(self.text.forward(&mut tape, store, &p.tokens)?);
                texts.push(p.text.as_str());
            }
            let zc = tape.concat_rows(&zc)?;
            let zt = tape.concat_rows(&zt)?;
            let sim = batch_similarity(&mut tape, zc, zt)?;
            let best = tape.value(sim).argmax_rows();
            correct += best.iter().enumerate().filter(|&(i, &j)| texts[i] == texts[j]).count();
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    /// Trains on clips of `videos`; returns the mean loss of each epoch.
    pub fn train(&self, store: &mut ParamStore, videos: &[VideoRecord], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let samples = self.samples(videos)?;
        if samples.is_empty() {
            return contract("vfe_train", "no clips: every video is shorter than one window span");
        }
        let mut opt = AdamW::new(
            store,
            AdamWConfig {
                lr: self.config.learning_rate,
                weight_decay: self.config.weight_decay,
                ..Default::default()
            },
        );
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        let mut tape = Tape::new();
        for epoch in 0..self.config.epochs {
            order.shuffle(rng);
            let (mut sum, mut n) = (0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<ClipSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                tape.clear();
                let (loss, report) = self.loss(&mut tape, store, &batch)?;
                if !report.total.is_finite() {
                    return Err(TasError::NonFinite(format!("vfe epoch {epoch}")));
                }
                tape.backward(loss)?;
                let grads = tape.param_grads(store);
                opt.step(store, &grads)?;
                sum += report.total;
                n += 1;
            }
            let mean = sum / n as f64;
            log::info!("vfe epoch {epoch}: loss {mean:.4}");
            history.push(mean);
        }
        Ok(history)
    }

    /// Frame-wise features for a whole video: the mean frame-token output of
    /// every clip covering each frame, over all window specs, phase offsets
    /// and a tail-aligned clip. Frames no clip reaches get the input
    /// projection of their raw features.
    pub fn extract_features(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let (t, din) = features.dims2();
        if din != self.input_dim {
            return contract("extract_features", format!("feature dim {din}, encoder expects {}", self.input_dim));
        }
        let d = self.config.width;
        let mut sum = vec![0.0; t * d];
        let mut hits = vec![0usize; t];
        for spec in self.config.window_specs()? {
            let reach = (spec.window_len - 1) * spec.ds + 1;
            if t < reach {
                continue;
            }
            let last = t - reach;
            let mut starts: Vec<usize> = Vec::new();
            for phase in 0..spec.ds.min(last + 1) {
                starts.extend((phase..=last).step_by(spec.stride()));
                starts.push(last - phase);
            }
            starts.sort_unstable();
            starts.dedup();
            for s in starts {
                let idx = spec.indices(s);
                let mut clip = Tensor::zeros(&[idx.len(), din]);
                for (r, &i) in idx.iter().enumerate() {
                    clip.data_mut()[r * din..(r + 1) * din].copy_from_slice(features.row(i));
                }
                let mut tape = Tape::new();
                let out = self.vision.forward(&mut tape, store, &clip)?;
                let f = tape.value(out.frames);
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, v) in sum[i * d..(i + 1) * d].iter_mut().zip(f.row(r)) {
                        *acc += v;
                    }
                    hits[i] += 1;
                }
            }
        }
        if hits.contains(&0) {
            let mut tape = Tape::new();
            let x = tape.constant(features.clone());
            let p = self.vision.input.forward(&mut tape, store, x)?;
            let p = tape.value(p);
            for i in 0..t {
                if hits[i] == 0 {
                    sum[i * d..(i + 1) * d].copy_from_slice(p.row(i));
                    hits[i] = 1;
                }
            }
        }
        for i in 0..t {
            let n = hits[i] as f64;
            sum[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= n);
        }
        Ok(Tensor::new(vec![t, d], sum)?)
    }
}
