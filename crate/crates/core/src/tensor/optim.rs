//! Parameter storage and AdamW with decoupled weight decay.
//!
//! A `ParamStore` holds the named parameters of one trainable unit; a
//! training step binds each entry onto a tape as a leaf, runs backward,
//! collects gradients by name, and calls `AdamW::step` against the same
//! store. The optimizer refuses silently mismatched wiring: the gradient
//! map must cover the store exactly.

use std::collections::BTreeMap;

use crate::rng::SeededRng;
use crate::tensor::{Result, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Parameter {
    pub fn zeros(shape: &[usize]) -> Self {
        Parameter {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Parameter {
            shape: shape.to_vec(),
            data: vec![1.0; shape.iter().product()],
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        Parameter {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| rng.normal() * std).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Gradients keyed by parameter name, as produced by one training step.
pub type GradsByName = BTreeMap<String, Vec<f64>>;

/// Named parameters in deterministic (sorted) order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, p: Parameter) {
        assert!(
            self.entries.insert(name.to_string(), p).is_none(),
            "duplicate parameter `{name}`"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn total_numel(&self) -> usize {
        self.entries.values().map(|p| p.numel()).sum()
    }

    /// FNV-1a over names and raw little-endian value bytes. Bitwise: any
    /// single-bit drift in any parameter changes the sum, so frozen weights
    /// can be checked before and after a training run.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, p) in &self.entries {
            eat(name.as_bytes());
            eat(&[0]);
            for d in &p.shape {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in &p.data {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    /// Copies every entry into `map` under `prefix` + name (checkpoint
    /// sections are name prefixes).
    pub fn export_prefixed(&self, map: &mut BTreeMap<String, Parameter>, prefix: &str) {
        for (name, p) in &self.entries {
            map.insert(format!("{prefix}{name}"), p.clone());
        }
    }

    /// Rebuilds a store from every `map` entry under `prefix`, stripping it.
    pub fn import_prefixed(map: &BTreeMap<String, Parameter>, prefix: &str) -> Self {
        let mut out = ParamStore::new();
        for (name, p) in map {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, p.clone());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW: moment estimates with bias correction, weight decay applied
/// directly to the parameter (decoupled from the gradient path).
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over the whole store. `grads` must hold exactly one
    /// gradient per parameter with matching length; anything else means the
    /// training step was wired wrong and is reported, not patched over.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradsByName) -> Result<()> {
        for name in params.names() {
            if !grads.contains_key(name) {
                return Err(TensorError::StateCorruption(format!(
                    "no gradient for parameter `{name}`"
                )));
            }
        }
        for name in grads.keys() {
            if !params.contains(name) {
                return Err(TensorError::StateCorruption(format!(
                    "gradient for unknown parameter `{name}`"
                )));
            }
        }
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            if g.len() != p.data.len() {
                return Err(TensorError::StateCorruption(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.data.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite(format!("gradient of `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            if m.len() != g.len() {
                return Err(TensorError::StateCorruption(format!(
                    "moment state for `{name}` has {} values, gradient has {}",
                    m.len(),
                    g.len()
                )));
            }
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                p.data[i] -=
                    self.cfg.lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}
