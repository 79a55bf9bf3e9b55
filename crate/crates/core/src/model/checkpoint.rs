//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `MOCRCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor's
//! `f32` values little-endian in header order. The header carries the model
//! config, vocabulary, training stage, RNG state and the parent's content hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MOCRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    VisualPretrain,
    LanguagePretrain,
    Finetune,
    LinearProbe,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Init => "init",
            Stage::VisualPretrain => "visual_pretrain",
            Stage::LanguagePretrain => "language_pretrain",
            Stage::Finetune => "finetune",
            Stage::LinearProbe => "linear_probe",
        };
        f.write_str(s)
    }
}

/// Position of a ChaCha8 stream: reseed with `seed` and skip to `word_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RngState {
    pub seed: u64,
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    config: ModelConfig,
    vocab: String,
    rng: RngState,
    parent_hash: Option<String>,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: ModelConfig,
    /// Vocabulary characters, in id order.
    pub vocab: String,
    pub rng: RngState,
    pub parent_hash: Option<String>,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    /// Snapshots every parameter of `store`.
    pub fn from_store(
        store: &ParamStore,
        stage: Stage,
        config: &ModelConfig,
        vocab: &str,
        rng: RngState,
        parent_hash: Option<String>,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in store.iter() {
            let data = var.flatten_all()?.to_vec1::<f32>()?;
            tensors.insert(name.to_string(), (var.dims().to_vec(), data));
        }
        Ok(Self {
            stage,
            config: config.clone(),
            vocab: vocab.to_string(),
            rng,
            parent_hash,
            metadata: BTreeMap::new(),
            tensors,
        })
    }

    /// Copies the stored tensors whose names match `prefixes` into `store`.
    /// Errors if a matching stored tensor has no counterpart in the store.
    pub fn load_into(&self, store: &ParamStore, prefixes: &[&str]) -> Result<usize> {
        let mut n = 0;
        for (name, (shape, data)) in &self.tensors {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), store.device())?;
            store.set(name, &t)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            rng: self.rng,
            parent_hash: self.parent_hash.clone(),
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, (shape, _))| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
        let payload: usize = self.tensors.values().map(|(_, d)| d.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("header decoding: {e}")))?;
        let mut pos = 20 + hlen;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 4 * n;
            tensors.insert(entry.name, (entry.shape, data));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            stage: header.stage,
            config: header.config,
            vocab: header.vocab,
            rng: header.rng,
            parent_hash: header.parent_hash,
            metadata: header.metadata,
            tensors,
        })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// SHA-256 over the tensors whose names match `prefixes`.
    pub fn params_hash(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, (shape, data)) in &self.tensors {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update(name.as_bytes());
            for d in shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes through a temporary file and a rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e))
    }
}
