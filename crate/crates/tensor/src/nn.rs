//! Parameterised layers. Each layer registers its weights in a
//! [`ParamStore`] at construction and binds them onto a tape in `forward`.

use rand_chacha::ChaCha8Rng;

use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[input, output], input, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[output], input, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Temporal convolution `taps×Cin×Cout` with a bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        taps: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = input * taps;
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[taps, input, output], fan_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[output], fan_in, rng),
            dilation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv1d(x, w, Some(b), self.dilation)
    }
}

/// Row-wise layer normalisation with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), crate::Tensor::full(&[dim], 1.0)),
            offset: store.add(format!("{name}.offset"), crate::Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let o = tape.param(store, self.offset);
        let n = tape.layer_norm(x)?;
        let s = tape.mul_row(n, g)?;
        tape.add_row(s, o)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        // fan-in of a one-hot lookup is 1; scale down so embeddings start small
        Self {
            table: store.add_uniform(format!("{name}.table"), &[vocab, dim], dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.embedding(t, ids)
    }
}
