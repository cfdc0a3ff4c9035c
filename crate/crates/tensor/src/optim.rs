use crate::param::{ParamId, ParamStore};
use crate::tensor::{contract, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with decoupled weight decay. Moments and parameters are rounded to
/// `f32` after each step so that checkpoints capture the state exactly.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return contract("AdamW::step", "gradient list does not match parameter store");
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = store.ids().nth(i).expect("index in range");
            if !store.trainable(id) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = (c.beta1 * m[k] + (1.0 - c.beta1) * gk) as f32 as f64;
                v[k] = (c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk) as f32 as f64;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                let decayed = p[k] * (1.0 - c.lr * c.weight_decay);
                p[k] = (decayed - c.lr * update) as f32 as f64;
            }
        }
        Ok(())
    }

    /// Optimizer state as named tensors, for checkpointing alongside the
    /// parameters of `store`.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as f64))];
        for id in store.ids() {
            out.push((format!("adam.m.{}", store.name(id)), self.m[id.index()].clone()));
            out.push((format!("adam.v.{}", store.name(id)), self.v[id.index()].clone()));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        let step = lookup("adam.step").ok_or_else(|| crate::TensorError::Format("missing adam.step".into()))?;
        self.step = step.item() as u64;
        for id in store.ids() {
            let get = |kind: &str| {
                let key = format!("adam.{kind}.{}", store.name(id));
                lookup(&key).ok_or(crate::TensorError::Format(format!("missing {key}")))
            };
            self.m[id.index()] = get("m")?;
            self.v[id.index()] = get("v")?;
        }
        Ok(())
    }

    pub fn moment(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (&self.m[id.index()], &self.v[id.index()])
    }
}
