//! The declarative run configuration (one TOML file) and the toy datasets it describes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::Normalization;
use super::finetune::{FinetuneConfig, ProbeConfig};
use crate::data::{PreparedSet, ResizeMode, TargetSize, Vocab};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::{LanguagePretrainConfig, VisualPretrainConfig};
use crate::synth::{synthesize_sample, Canvas, CorpusSpec, DatasetSpec, GlyphFont, SplitFractions, StyleRanges, TextSample};

/// Which toy dataset a sample set is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Synthetic-style labeled images with character boxes, for language pretraining.
    Synthetic,
    /// Real-style images whose labels are never used, for visual pretraining.
    Unlabeled,
    /// Real-style labeled training images.
    Labeled,
    /// Real-style validation images.
    Val,
    /// Real-style test images.
    Test,
}

impl DataKind {
    pub const ALL: [DataKind; 5] = [
        DataKind::Synthetic,
        DataKind::Unlabeled,
        DataKind::Labeled,
        DataKind::Val,
        DataKind::Test,
    ];

    /// Keeps the per-sample seeds of different sets disjoint.
    fn salt(self) -> u64 {
        let k = match self {
            DataKind::Synthetic => 1,
            DataKind::Unlabeled => 2,
            DataKind::Labeled => 3,
            DataKind::Val => 4,
            DataKind::Test => 5,
        };
        k << 48
    }

    pub fn name(self) -> &'static str {
        match self {
            DataKind::Synthetic => "synthetic",
            DataKind::Unlabeled => "unlabeled",
            DataKind::Labeled => "labeled",
            DataKind::Val => "val",
            DataKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSizes {
    pub synthetic: usize,
    pub unlabeled: usize,
    pub labeled: usize,
    pub val: usize,
    pub test: usize,
}

impl DataSizes {
    pub fn of(&self, kind: DataKind) -> usize {
        match kind {
            DataKind::Synthetic => self.synthetic,
            DataKind::Unlabeled => self.unlabeled,
            DataKind::Labeled => self.labeled,
            DataKind::Val => self.val,
            DataKind::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub alphabet: String,
    pub min_length: usize,
    pub max_length: usize,
    /// Probability that a character is followed by its fixed successor.
    pub bigram_peak: f64,
    /// Seed of the successor table; shared by every set so they speak one language.
    pub corpus_seed: u64,
    pub resize: ResizeMode,
    pub synthetic_style: StyleRanges,
    pub real_style: StyleRanges,
    pub sizes: DataSizes,
}

impl DataConfig {
    pub fn alphabet(&self) -> Vec<char> {
        self.alphabet.chars().collect()
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.alphabet())
    }

    pub fn corpus(&self) -> CorpusSpec {
        CorpusSpec::peaked(
            self.alphabet(),
            self.bigram_peak,
            (self.min_length, self.max_length),
            0,
            self.corpus_seed,
        )
    }

    pub fn style(&self, kind: DataKind) -> &StyleRanges {
        match kind {
            DataKind::Synthetic => &self.synthetic_style,
            _ => &self.real_style,
        }
    }

    pub fn dataset_spec(&self, kind: DataKind, model: &ModelConfig) -> DatasetSpec {
        DatasetSpec {
            corpus: self.corpus(),
            style: self.style(kind).clone(),
            canvas: Canvas {
                channels: model.channels,
                height: model.height,
                width: model.width,
            },
            splits: SplitFractions::default(),
        }
    }

    pub fn fonts(&self) -> Result<Vec<GlyphFont>> {
        let alphabet = self.alphabet();
        let mut ids: Vec<u32> = self
            .synthetic_style
            .fonts
            .iter()
            .chain(&self.real_style.fonts)
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().map(|id| GlyphFont::procedural(id, &alphabet)).collect()
    }

    /// Seed handed to the renderer for a set of `kind` in a run seeded with `seed`.
    pub fn dataset_seed(&self, kind: DataKind, seed: u64) -> u64 {
        seed ^ kind.salt()
    }

    /// Renders `n` samples of `kind` in memory.
    pub fn samples(&self, kind: DataKind, n: usize, model: &ModelConfig, seed: u64) -> Result<Vec<TextSample>> {
        let spec = self.dataset_spec(kind, model);
        spec.corpus.validate()?;
        let fonts = self.fonts()?;
        let ds = self.dataset_seed(kind, seed);
        (0..n).map(|i| synthesize_sample(&spec, &fonts, ds, i)).collect()
    }

    pub fn prepare(&self, samples: &[TextSample], model: &ModelConfig) -> Result<PreparedSet> {
        PreparedSet::from_samples(
            samples,
            &self.vocab()?,
            self.resize,
            TargetSize {
                height: model.height,
                width: model.width,
            },
            model.patch_width,
            model.num_queries,
        )
    }

    /// Renders and prepares the configured number of samples of `kind`.
    pub fn build(&self, kind: DataKind, model: &ModelConfig, seed: u64) -> Result<PreparedSet> {
        let samples = self.samples(kind, self.sizes.of(kind), model, seed)?;
        self.prepare(&samples, model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub mask_ratios: Vec<f64>,
    pub patch_widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub visual: VisualPretrainConfig,
    pub language: LanguagePretrainConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
    pub eval: Normalization,
    pub ablation: AblationConfig,
}

/// The shipped default configuration, embedded so the binary runs without files.
pub const DEFAULT_CONFIG: &str = include_str!("../../../../configs/default.toml");

impl AppConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e))
    }

    pub fn default_config() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("shipped default config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let vocab = self.data.vocab()?;
        if vocab.size() != self.model.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size is {} but the alphabet needs {} classes (characters plus end symbol)",
                self.model.vocab_size,
                vocab.size()
            )));
        }
        if self.data.max_length >= self.model.num_queries {
            return Err(Error::Config(format!(
                "texts of up to {} characters need more than {} queries (one for the end symbol)",
                self.data.max_length, self.model.num_queries
            )));
        }
        self.data.corpus().validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(canonical)))
    }
}
