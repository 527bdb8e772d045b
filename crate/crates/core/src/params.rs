//! Named parameter storage, seeded initialization, Adam and the cosine schedule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{BufferUpdate, Grads};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are stored but never trained.
    pub trainable: bool,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    /// Fan-in scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Replace a value, possibly with a different shape (head re-initialization).
    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Whether the graph should produce a gradient for this parameter.
    pub fn wants_grad(&self, id: ParamId) -> bool {
        let p = &self.params[id.0];
        p.trainable && !p.frozen
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected entries.
    pub fn hash_of(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate>) {
        for u in updates {
            let t = self.get_mut(u.id);
            for (r, v) in t.data_mut().iter_mut().zip(&u.batch_value) {
                *r = (1.0 - u.momentum) * *r + u.momentum * v;
            }
        }
    }
}

/// Adam over an explicit set of parameters. Parameters outside the set, frozen
/// parameters and buffers are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: &[ParamId]) -> Self {
        let ids: Vec<ParamId> = ids.iter().copied().filter(|&id| store.param(id).trainable).collect();
        let m = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            ids,
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, &id) in self.ids.iter().enumerate() {
            if store.param(id).frozen {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let value = store.get_mut(id).data_mut();
            for i in 0..value.len() {
                let gi = g.data()[i] + self.weight_decay * value[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at the last epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
}

impl CosineSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_max;
        }
        let frac = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
