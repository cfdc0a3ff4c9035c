//! Hierarchical encoder-decoder segmentation stack.
//!
//! One encoder stage and `num_decoders` refinement stages, each made of
//! `blocks_per_stage` blocks. Block `i` (1-based) uses a dilated temporal
//! convolution with dilation `2^i` and single-head attention restricted to a
//! local window of `2^i` frames, both clamped to the sequence length.
//! Decoder blocks attend across stages: queries and keys are computed from
//! the previous stage's hidden state concatenated with the current one,
//! values from the current one only.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tas_tensor::nn::{Conv1d, Linear};
use tas_tensor::{ParamStore, Tape, Tensor, Var};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AseConfig {
    pub num_decoders: usize,
    pub blocks_per_stage: usize,
    pub width: usize,
    /// Query/key/value width of the attention layers; 0 means `width / 2`.
    pub attention_dim: usize,
    /// Taps of the dilated convolution (odd).
    pub kernel_taps: usize,
}

impl Default for AseConfig {
    fn default() -> Self {
        Self {
            num_decoders: 3,
            blocks_per_stage: 9,
            width: 64,
            attention_dim: 0,
            kernel_taps: 3,
        }
    }
}

impl AseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage == 0 || self.width == 0 {
            return contract("AseConfig", "blocks_per_stage and width must be positive");
        }
        if self.kernel_taps.is_multiple_of(2) {
            return contract("AseConfig", format!("kernel_taps must be odd, got {}", self.kernel_taps));
        }
        if self.blocks_per_stage > 30 {
            return contract("AseConfig", "blocks_per_stage above 30 overflows the window schedule");
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        1 + self.num_decoders
    }

    fn attention_width(&self) -> usize {
        if self.attention_dim == 0 {
            (self.width / 2).max(1)
        } else {
            self.attention_dim
        }
    }
}

/// Window (and dilation) of 1-based block `i` for a sequence of `len` frames.
pub fn block_window(i: usize, len: usize) -> usize {
    (1usize << i).min(len.max(1))
}

/// Single-head attention sublayer with optional cross-stage context.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, att: usize, cross: bool, rng: &mut ChaCha8Rng) -> Self {
        let qk_in = if cross { 2 * width } else { width };
        Self {
            query: Linear::new(store, &format!("{name}.query"), qk_in, att, rng),
            key: Linear::new(store, &format!("{name}.key"), qk_in, att, rng),
            value: Linear::new(store, &format!("{name}.value"), width, att, rng),
            output: Linear::new(store, &format!("{name}.output"), att, width, rng),
        }
    }

    /// `context`, when given, is concatenated with `x` to form queries and keys.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, context: Option<Var>, window: usize) -> Result<Var> {
        Ok(self.forward_traced(tape, store, x, context, window)?.0)
    }

    /// Like [`Attention::forward`], also returning the raw attention node whose
    /// weights can be read back with [`Tape::attention_weights`].
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        context: Option<Var>,
        window: usize,
    ) -> Result<(Var, Var)> {
        let qk_in = match context {
            Some(c) => {
                let (tc, tx) = (tape.value(c).rows(), tape.value(x).rows());
                if tc != tx {
                    return contract("cross_attention", format!("context has {tc} frames, input {tx}"));
                }
                tape.concat_cols(&[c, x])?
            }
            None => x,
        };
        let q = self.query.forward(tape, store, qk_in)?;
        let k = self.key.forward(tape, store, qk_in)?;
        let v = self.value.forward(tape, store, x)?;
        let a = tape.local_attention(q, k, v, window)?;
        Ok((self.output.forward(tape, store, a)?, a))
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub index: usize,
    pub conv: Conv1d,
    pub attention: Attention,
    pub project: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, index: usize, cfg: &AseConfig, cross: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        Self {
            index,
            conv: Conv1d::new(store, &format!("{name}.conv"), w, w, cfg.kernel_taps, 1 << index, rng),
            attention: Attention::new(store, &format!("{name}.attention"), w, cfg.attention_width(), cross, rng),
            project: Linear::new(store, &format!("{name}.project"), w, w, rng),
        }
    }

    /// `x + project(ff + attention(instance_norm(ff)))` with
    /// `ff = relu(dilated_conv(x))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, context: Option<Var>) -> Result<Var> {
        Ok(self.forward_traced(tape, store, x, context)?.0)
    }

    /// Returns the block output and its raw attention node.
    pub fn forward_traced(&self, tape: &mut Tape, store: &ParamStore, x: Var, context: Option<Var>) -> Result<(Var, Var)> {
        let len = tape.value(x).rows();
        let span = block_window(self.index, len);
        let w = tape.param(store, self.conv.weight);
        let b = tape.param(store, self.conv.bias);
        let c = tape.conv1d(x, w, Some(b), span)?;
        let ff = tape.relu(c);
        let n = tape.instance_norm(ff)?;
        let (a, weights) = self.attention.forward_traced(tape, store, n, context, span)?;
        let s = tape.add(ff, a)?;
        let y = self.project.forward(tape, store, s)?;
        Ok((tape.add(x, y)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

impl Stage {
    fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        outputs: usize,
        cfg: &AseConfig,
        cross: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), input, cfg.width, rng),
            blocks: (1..=cfg.blocks_per_stage)
                .map(|i| Block::new(store, &format!("{name}.block{i}"), i, cfg, cross, rng))
                .collect(),
            head: Linear::new(store, &format!("{name}.head"), cfg.width, outputs, rng),
        }
    }

    /// Returns `(hidden, logits)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, context: Option<Var>) -> Result<(Var, Var)> {
        let mut h = self.input.forward(tape, store, x)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h, context)?;
        }
        let logits = self.head.forward(tape, store, h)?;
        Ok((h, logits))
    }
}

/// How a stage's logits become the next stage's input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Class scores; the next stage sees row-wise softmax probabilities.
    Softmax,
    /// A single boundary score; the next stage sees its sigmoid.
    Sigmoid,
}

/// Encoder plus refinement decoders. Used with `Head::Softmax` for action
/// classes and with `Head::Sigmoid` and one output for boundaries.
#[derive(Clone, Debug)]
pub struct Ase {
    pub config: AseConfig,
    pub outputs: usize,
    pub head: Head,
    pub encoder: Stage,
    pub decoders: Vec<Stage>,
}

impl Ase {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        outputs: usize,
        head: Head,
        config: &AseConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || outputs == 0 {
            return contract("Ase::new", "input and output widths must be positive");
        }
        let encoder = Stage::new(store, &format!("{name}.encoder"), input_dim, outputs, config, false, rng);
        let decoders = (1..=config.num_decoders)
            .map(|g| Stage::new(store, &format!("{name}.decoder{g}"), outputs, outputs, config, true, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            outputs,
            head,
            encoder,
            decoders,
        })
    }

    /// Per-stage `T×outputs` logits, encoder first.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Vec<Var>> {
        if tape.value(features).rows() == 0 {
            return contract("ase_forward", "empty feature sequence");
        }
        let (mut hidden, mut logits) = self.encoder.forward(tape, store, features, None)?;
        let mut stages = vec![logits];
        for decoder in &self.decoders {
            let input = match self.head {
                Head::Softmax => tape.softmax(logits, 1)?,
                Head::Sigmoid => tape.sigmoid(logits),
            };
            (hidden, logits) = decoder.forward(tape, store, input, Some(hidden))?;
            stages.push(logits);
        }
        Ok(stages)
    }

    /// Forward pass without keeping a tape, returning stage values.
    pub fn infer(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let stages = self.forward(&mut tape, store, x)?;
        Ok(stages.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}
