//! Minimal dense-network substrate with hand-derived backprop.
//!
//! Parameters live in a [`ParamStore`]; layers hold [`ParamId`] handles into
//! it. Backward passes write into a separate [`Gradients`] buffer so that
//! per-item gradients can be computed independently and reduced in a fixed
//! order before [`ParamStore::accumulate`].

pub mod checkpoint;
mod layers;

pub use layers::{Activation, DenseCache, DenseLayer, EncoderCache, Mlp, MlpCache, SetEncoder};

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub momentum: Vec<f64>,
}

/// Named trainable tensors with gradient and momentum buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
    /// Bumped whenever values change, so stale forward caches are detectable.
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        let name = name.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len(), "tensor {name}: shape/value mismatch");
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate tensor name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.tensors.push(Tensor {
            name,
            shape,
            grad: vec![0.0; numel],
            momentum: vec![0.0; numel],
            value,
        });
        self.version += 1;
        ParamId(id)
    }

    /// Dense weight initialized uniformly in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_out: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let value = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.add(name, vec![fan_out, fan_in], value)
    }

    /// Auto-decoded code vector drawn from N(0, std²).
    pub fn add_code<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        len: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = (0..len).map(|_| dist.sample(rng)).collect();
        self.add(name, vec![len], value)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].value
    }

    /// Mutable access to a tensor's values; invalidates forward caches.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.version += 1;
        &mut self.tensors[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].grad
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a gradient buffer into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        assert_eq!(grads.slots.len(), self.tensors.len(), "gradient buffer from another store");
        for (t, slot) in self.tensors.iter_mut().zip(&grads.slots) {
            if let Some(g) = slot {
                for (a, b) in t.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// One SGD-with-momentum step over every tensor, then zeroes gradients:
    /// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
    pub fn sgd_step(&mut self, cfg: &SgdConfig) {
        for t in &mut self.tensors {
            for ((theta, g), v) in t.value.iter_mut().zip(&mut t.grad).zip(&mut t.momentum) {
                *v = cfg.momentum * *v + *g + cfg.weight_decay * *theta;
                *theta -= cfg.lr * *v;
                *g = 0.0;
            }
        }
        self.version += 1;
    }

    /// FNV-1a hash over every value bit pattern, in tensor order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for t in &self.tensors {
            for v in t.value.iter().chain(&t.momentum) {
                eat(v.to_bits());
            }
        }
        h
    }

    /// Overwrites values (and momentum, when present) from stored tensors
    /// named `prefix + name`.
    pub fn load_from(&mut self, prefix: &str, stored: &[checkpoint::StoredTensor]) -> Result<()> {
        let lookup: HashMap<&str, &checkpoint::StoredTensor> =
            stored.iter().map(|s| (s.name.as_str(), s)).collect();
        for t in &mut self.tensors {
            let key = format!("{prefix}{}", t.name);
            let s = lookup
                .get(key.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if s.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {key}: shape {:?} != expected {:?}",
                    s.shape, t.shape
                )));
            }
            t.value.copy_from_slice(&s.value);
            if let Some(m) = lookup.get(format!("{key}{}", checkpoint::MOMENTUM_SUFFIX).as_str()) {
                t.momentum.copy_from_slice(&m.value);
            } else {
                t.momentum.iter_mut().for_each(|v| *v = 0.0);
            }
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.version += 1;
        Ok(())
    }
}

/// Sparse per-tensor gradient buffer tied to one [`ParamStore`] layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn slot(&mut self, store: &ParamStore, id: ParamId) -> &mut [f64] {
        let len = store.tensors[id.0].value.len();
        self.slots[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id.0].as_deref()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| *v == 0.0))
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}
