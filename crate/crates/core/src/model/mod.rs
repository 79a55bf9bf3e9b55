//! The vertical-patch encoder, the parallel character-query decoder, and the
//! CTC sequence head.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod ops;
pub mod params;

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

pub use checkpoint::{Checkpoint, Stage};
pub use config::{DecoderKind, ModelConfig};
pub use layers::Ctx;
pub use params::ParamStore;

use self::layers::{drop_path_schedule, linear, DecoderBlock, LayerNorm, SelfBlock};
use self::ops::key_bias;
use self::params::Init;
use crate::error::{Error, Result};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const CTC_PREFIX: &str = "ctc.";
pub const MIM_PREFIX: &str = "mim.";
pub const QUERY_CLASSIFIER_PREFIX: &str = "decoder.classifier.";
pub const CTC_CLASSIFIER_PREFIX: &str = "ctc.classifier.";

// Per-component init streams, so adding one component never reshuffles another.
const ENCODER_STREAM: u64 = 0x0e0c;
const DECODER_STREAM: u64 = 0x0dec;
const CTC_STREAM: u64 = 0x0c7c;
pub(crate) const MIM_STREAM: u64 = 0x0313;

/// Splits `B × C × H × W` images into `B × M × (C·H·pw)` vertical patches,
/// left to right. Each patch vector is ordered channel, row, column.
pub fn patchify(images: &Tensor, patch_width: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if patch_width == 0 || w % patch_width != 0 {
        return Err(Error::Config(format!(
            "patch width {patch_width} does not divide image width {w}"
        )));
    }
    let m = w / patch_width;
    Ok(images
        .reshape((b, c, h, m, patch_width))?
        .permute((0, 3, 1, 2, 4))?
        .reshape((b, m, c * h * patch_width))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, height: usize) -> Result<Tensor> {
    let (b, m, p) = patches.dims3()?;
    if p % (channels * height) != 0 {
        return Err(Error::Shape(format!(
            "patch length {p} is not a multiple of {channels}x{height}"
        )));
    }
    let pw = p / (channels * height);
    Ok(patches
        .reshape((b, m, channels, height, pw))?
        .permute((0, 2, 3, 1, 4))?
        .reshape((b, channels, height, m * pw))?)
}

/// Checks that every row of a `B × M` 0/1 visibility tensor keeps at least one patch.
pub fn check_visible(visible: &Tensor, num_patches: usize) -> Result<()> {
    let (_, m) = visible.dims2()?;
    if m != num_patches {
        return Err(Error::Shape(format!("mask covers {m} patches, model has {num_patches}")));
    }
    let counts = visible.sum(D::Minus1)?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
    if counts.iter().any(|&c| c < 0.5) {
        return Err(Error::EmptyMask("every patch of a sample is masked"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Encoder {
    patch_embed: Linear,
    pos_embed: Tensor,
    blocks: Vec<SelfBlock>,
    norm: LayerNorm,
    num_patches: usize,
    patch_dim: usize,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let (e, m) = (cfg.enc_dim, cfg.num_patches());
        let patch_embed = linear(init, "encoder.patch_embed", cfg.patch_dim(), e)?;
        let pos_embed = init.normal("encoder.pos_embed", &[1, m, e], 0.02)?;
        let blocks = drop_path_schedule(cfg.drop_path_rate, cfg.enc_layers)
            .into_iter()
            .enumerate()
            .map(|(i, dp)| SelfBlock::new(init, &format!("encoder.blocks.{i}"), e, cfg.enc_heads, cfg.mlp_ratio, dp))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(init, "encoder.norm", e)?;
        Ok(Self {
            patch_embed,
            pos_embed,
            blocks,
            norm,
            num_patches: m,
            patch_dim: cfg.patch_dim(),
        })
    }

    /// Learnable 1-D positional embeddings, `1 × M × E`.
    pub fn pos_embed(&self) -> &Tensor {
        &self.pos_embed
    }

    /// Encodes `B × M × P` patch vectors into `B × M × E` representations.
    ///
    /// With `visible` (a `B × M` 0/1 tensor), hidden patches are excluded as
    /// keys in every attention layer, so visible outputs do not depend on them.
    pub fn forward(&self, patches: &Tensor, visible: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        let (_, m, p) = patches.dims3()?;
        if m != self.num_patches || p != self.patch_dim {
            return Err(Error::Shape(format!(
                "encoder expects {}x{} patches, got {m}x{p}",
                self.num_patches, self.patch_dim
            )));
        }
        let bias = match visible {
            Some(v) => {
                check_visible(v, self.num_patches)?;
                Some(key_bias(v)?)
            }
            None => None,
        };
        let mut x = self.patch_embed.forward(patches)?.broadcast_add(&self.pos_embed)?;
        for block in &self.blocks {
            x = block.forward(&x, bias.as_ref(), ctx)?;
        }
        self.norm.forward(&x)
    }
}

#[derive(Debug, Clone)]
pub struct QueryDecoder {
    queries: Tensor,
    memory_proj: Option<Linear>,
    blocks: Vec<DecoderBlock>,
    norm: LayerNorm,
    classifier: Linear,
    enc_dim: usize,
}

impl QueryDecoder {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let d = cfg.dec_dim;
        let queries = init.normal("decoder.queries", &[1, cfg.num_queries, d], 0.02)?;
        let memory_proj = if cfg.enc_dim != d {
            Some(linear(init, "decoder.memory_proj", cfg.enc_dim, d)?)
        } else {
            None
        };
        let blocks = drop_path_schedule(cfg.drop_path_rate, cfg.dec_layers)
            .into_iter()
            .enumerate()
            .map(|(i, dp)| DecoderBlock::new(init, &format!("decoder.blocks.{i}"), d, cfg.dec_heads, cfg.mlp_ratio, dp))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(init, "decoder.norm", d)?;
        let classifier = linear(init, "decoder.classifier", d, cfg.vocab_size)?;
        Ok(Self {
            queries,
            memory_proj,
            blocks,
            norm,
            classifier,
            enc_dim: cfg.enc_dim,
        })
    }

    /// Per-query embeddings before the classifier, `B × N × D`.
    pub fn features(&self, memory: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (b, _, e) = memory.dims3()?;
        if e != self.enc_dim {
            return Err(Error::Shape(format!("memory width {e}, decoder expects {}", self.enc_dim)));
        }
        let memory = match &self.memory_proj {
            Some(p) => p.forward(memory)?,
            None => memory.clone(),
        };
        let (_, n, d) = self.queries.dims3()?;
        let mut x = self.queries.broadcast_as((b, n, d))?.contiguous()?;
        for block in &self.blocks {
            x = block.forward(&x, &memory, ctx)?;
        }
        self.norm.forward(&x)
    }

    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.classifier.forward(features)?)
    }

    /// All character predictions in one parallel pass, `B × N × V`.
    pub fn forward(&self, memory: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        self.classify(&self.features(memory, ctx)?)
    }
}

#[derive(Debug, Clone)]
pub struct CtcHead {
    blocks: Vec<SelfBlock>,
    norm: LayerNorm,
    classifier: Linear,
}

impl CtcHead {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let e = cfg.enc_dim;
        let blocks = drop_path_schedule(cfg.drop_path_rate, cfg.ctc_layers)
            .into_iter()
            .enumerate()
            .map(|(i, dp)| SelfBlock::new(init, &format!("ctc.blocks.{i}"), e, cfg.enc_heads, cfg.mlp_ratio, dp))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(init, "ctc.norm", e)?,
            classifier: linear(init, "ctc.classifier", e, cfg.vocab_size + 1)?,
        })
    }

    pub fn features(&self, memory: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let mut x = memory.clone();
        for block in &self.blocks {
            x = block.forward(&x, None, ctx)?;
        }
        self.norm.forward(&x)
    }

    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.classifier.forward(features)?)
    }

    /// Per-frame logits `B × M × (V + 1)`, blank last.
    pub fn forward(&self, memory: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        self.classify(&self.features(memory, ctx)?)
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Query(QueryDecoder),
    Ctc(CtcHead),
}

/// Encoder plus recognition head, with parameters held in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MaskOcr {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub head: Head,
}

impl MaskOcr {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg, &mut store.init(seed ^ ENCODER_STREAM))?;
        let head = match cfg.decoder {
            DecoderKind::Query => Head::Query(QueryDecoder::new(cfg, &mut store.init(seed ^ DECODER_STREAM))?),
            DecoderKind::Ctc => Head::Ctc(CtcHead::new(cfg, &mut store.init(seed ^ CTC_STREAM))?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            head,
        })
    }

    /// Name prefix of the head's parameters.
    pub fn head_prefix(&self) -> &'static str {
        match self.head {
            Head::Query(_) => DECODER_PREFIX,
            Head::Ctc(_) => CTC_PREFIX,
        }
    }

    pub fn classifier_prefix(&self) -> &'static str {
        match self.head {
            Head::Query(_) => QUERY_CLASSIFIER_PREFIX,
            Head::Ctc(_) => CTC_CLASSIFIER_PREFIX,
        }
    }

    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        patchify(images, self.cfg.patch_width)
    }

    pub fn encode(&self, images: &Tensor, visible: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        self.encoder.forward(&self.patchify(images)?, visible, ctx)
    }

    /// Encodes with `masked` (`B × M`, 1 = hidden) patches excluded from attention
    /// and their output rows replaced by zeros. Positional embeddings are not yet added.
    pub fn masked_encode(&self, images: &Tensor, masked: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let visible = (1.0 - masked)?;
        let f = self.encode(images, Some(&visible), ctx)?;
        Ok(f.broadcast_mul(&visible.unsqueeze(D::Minus1)?)?)
    }

    /// Encoder output with positional embeddings re-added, as fed to the head.
    pub fn memory(&self, f: &Tensor) -> Result<Tensor> {
        Ok(f.broadcast_add(self.encoder.pos_embed())?)
    }

    pub fn head_features(&self, f: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let memory = self.memory(f)?;
        match &self.head {
            Head::Query(d) => d.features(&memory, ctx),
            Head::Ctc(c) => c.features(&memory, ctx),
        }
    }

    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        match &self.head {
            Head::Query(d) => d.classify(features),
            Head::Ctc(c) => c.classify(features),
        }
    }

    /// Head logits from encoder output `f`.
    pub fn decode(&self, f: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        self.classify(&self.head_features(f, ctx)?)
    }

    /// Full recognition pass: `B × N × V` (query head) or `B × M × (V+1)` (CTC head).
    pub fn forward_recognize(&self, images: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let f = self.encode(images, None, ctx)?;
        self.decode(&f, ctx)
    }
}

/// Row-wise argmax of `B × T × V` logits.
pub fn argmax_ids(logits: &Tensor) -> Result<Vec<Vec<u32>>> {
    Ok(logits.argmax(D::Minus1)?.to_vec2::<u32>()?)
}

/// Collapses repeated frame labels and drops blanks.
pub fn ctc_collapse(frames: &[u32], blank: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &f in frames {
        if Some(f) != prev && f != blank {
            out.push(f);
        }
        prev = Some(f);
    }
    out
}
