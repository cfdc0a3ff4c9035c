use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{contract, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named learned tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape product matches"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Frozen parameters are bound as constants and receive no gradient.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        self.entries.iter_mut().for_each(|e| e.trainable = false);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs; every stored name must be
    /// present with a matching shape.
    pub fn load<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in values {
            let Some(id) = self.find(name) else { continue };
            let e = &mut self.entries[id.0];
            if e.value.shape() != t.shape() {
                return contract(
                    "ParamStore::load",
                    format!("{name}: stored {:?}, loaded {:?}", e.value.shape(), t.shape()),
                );
            }
            e.value = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return contract("ParamStore::load", format!("missing parameter {}", self.entries[i].name));
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, so the store survives a
    /// 32-bit checkpoint round trip bit-exactly.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}
