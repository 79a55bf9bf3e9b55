//! Named, seeded parameter storage.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a dotted name such as
//! `encoder.blocks.0.attn.q.weight`. Initialization draws from a ChaCha stream
//! so a model is a pure function of its config and seed.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
}

/// Hands out freshly initialized parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn init(&mut self, seed: u64) -> Init<'_> {
        Init {
            store: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables whose names start with any of `prefixes`, in name order.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_elements(&self, prefixes: &[&str]) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of matching parameters.
    pub fn hash(&self, prefixes: &[&str]) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites the value of an existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.get(name)?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?}, model expects {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Copies every parameter present in both stores from `other`; returns the copied names.
    pub fn copy_from(&self, other: &ParamStore, prefixes: &[&str]) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for (name, var) in other.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) && self.vars.contains_key(name) {
                self.set(name, var.as_tensor())?;
                copied.push(name.to_string());
            }
        }
        Ok(copied)
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Writes back values taken by [`ParamStore::snapshot`].
    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in snapshot {
            self.set(name, value)?;
        }
        Ok(())
    }

    fn insert(&mut self, name: String, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        Ok(out)
    }
}

impl Init<'_> {
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.store.insert(name.into(), shape, data)
    }

    /// Xavier-uniform, for `(fan_out, fan_in)` weight matrices.
    pub fn xavier(&mut self, name: impl Into<String>, fan_out: usize, fan_in: usize) -> Result<Tensor> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-a..a) as f32)
            .collect();
        self.store.insert(name.into(), &[fan_out, fan_in], data)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.store.insert(name.into(), shape, vec![value; n])
    }
}
