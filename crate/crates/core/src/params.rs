//! Named trainable tensors, their seeded initialization, and the Adam optimizer.
//!
//! Parameter values are kept at `f32` precision at all times so the in-memory
//! model and its checkpoint are bit-identical.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled {
        fan_in: usize,
        gain: f64,
    },
    /// Identity matrix plus small normal noise.
    NoisyIdentity {
        noise: f64,
    },
}

/// FNV-1a over the bytes of `s`, mixed with `seed`.
pub fn stable_hash(seed: u64, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for a named stream.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(seed, name))
}

#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter drawn from its own name-keyed RNG stream, so values do
    /// not depend on registration order.
    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        let mut rng = named_rng(seed, name);
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, c),
            Init::Scaled { fan_in, gain } => {
                let normal = Normal::new(0.0, gain / (fan_in.max(1) as f64).sqrt()).expect("valid std");
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))
            }
            Init::NoisyIdentity { noise } => {
                assert_eq!(shape.len(), 2);
                let cols = shape[1];
                let normal = Normal::new(0.0, noise).expect("valid std");
                Tensor::from_fn(shape, |i| f64::from(i / cols == i % cols) + normal.sample(&mut rng))
            }
        };
        self.insert(name, t);
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t.map(round_f32));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Overwrites an existing parameter, keeping the `f32` grid.
    pub fn set(&mut self, name: &str, t: Tensor) {
        let slot = self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(slot.shape(), t.shape(), "shape change for `{name}`");
        *slot = t.map(round_f32);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian `f32` payloads.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.data_mut()[i] = round_f32(p.data()[i] - update);
            }
        }
    }
}
