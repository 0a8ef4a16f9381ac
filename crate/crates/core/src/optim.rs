//! Named parameter storage and the Adam optimizer.
//!
//! Parameters live in an insertion-ordered map so that every walk over them
//! (updates, serialization, gradient reduction) happens in one deterministic
//! order. Each entry carries its own Adam moments and step counter; entries
//! that receive no gradient in a step are left untouched, counter included.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Array,
    pub m: Array,
    pub v: Array,
    pub t: u64,
}

impl Param {
    fn new(value: Array) -> Self {
        let (r, c) = value.shape();
        Param { value, m: Array::zeros(r, c), v: Array::zeros(r, c), t: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn register(&mut self, name: &str, value: Array) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        self.entries.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    /// Registers a `rows x cols` parameter drawn from
    /// `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`, elementwise in row-major
    /// order. Biases pass the fan-in of the layer they belong to.
    pub fn register_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(name, Array::from_vec(rows, cols, data)?)
    }

    pub fn value(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn set_value(&mut self, name: &str, value: Array) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if !p.value.same_shape(&value) {
            return Err(Error::Shape(format!(
                "parameter {name} is {}x{}, got {}x{}",
                p.value.rows(),
                p.value.cols(),
                value.rows(),
                value.cols()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    /// Entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.all_finite())
    }

    /// Copies parameter values (not optimizer state) from `other`, which
    /// must hold exactly the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Contract(format!(
                "stores hold {} vs {} parameters",
                self.len(),
                other.len()
            )));
        }
        for (name, p) in &other.entries {
            let q = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
            if !q.value.same_shape(&p.value) {
                return Err(Error::Shape(format!("parameter {name} shape mismatch")));
            }
            q.value = p.value.clone();
        }
        Ok(())
    }
}

/// Gradient accumulator keyed by parameter name. Accumulation order never
/// affects the result beyond floating-point addition order, which callers
/// keep fixed by reducing batches in index order.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    map: IndexMap<String, Array>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: &str, g: Array) {
        self.map.insert(name.to_string(), g);
    }

    pub fn accumulate(&mut self, name: &str, g: &Array) -> Result<()> {
        match self.map.get_mut(name) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.map.insert(name.to_string(), g.clone());
                Ok(())
            }
        }
    }

    pub fn merge(&mut self, other: &Grads) -> Result<()> {
        for (name, g) in &other.map {
            self.accumulate(name, g)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            g.scale_assign(c);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.all_finite())
    }

    /// Largest absolute entry across all gradients; 0 when empty.
    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.data().iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// One Adam update with bias correction. Every gradient must name a stored
/// parameter of the same shape; parameters without a gradient are skipped.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
    for name in grads.names() {
        if !store.contains(name) {
            return Err(Error::Contract(format!("gradient for unknown parameter {name}")));
        }
    }
    for (name, p) in store.entries.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if !p.value.same_shape(g) {
            return Err(Error::Shape(format!(
                "gradient for {name} is {}x{}, parameter is {}x{}",
                g.rows(),
                g.cols(),
                p.value.rows(),
                p.value.cols()
            )));
        }
        p.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(p.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(p.t as i32);
        for i in 0..p.value.len() {
            let gv = g.data()[i];
            let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * gv;
            let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * gv * gv;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            p.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
