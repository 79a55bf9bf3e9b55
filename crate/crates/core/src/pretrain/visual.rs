//! Stage 1: masked image modeling on the encoder.
//!
//! Visible patches go through the encoder with masked attention. A latent
//! regressor turns mask queries (one shared vector plus the positional
//! embedding of each hidden patch) into predicted representations by
//! cross-attending to the visible ones; these are aligned with the encoder's
//! own representations of the hidden patches and decoded back to normalized
//! pixels.

use candle_core::{Device, Module, Tensor, D};
use candle_nn::Linear;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PreparedSet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{mim_loss, patch_pixel_target, Loss};
use crate::model::layers::{linear, CrossBlock, LayerNorm, SelfBlock};
use crate::model::ops::key_bias;
use crate::model::params::Init;
use crate::model::{
    patchify, unpatchify, Checkpoint, Ctx, Encoder, ModelConfig, ParamStore, Stage, ENCODER_PREFIX,
    MIM_PREFIX, MIM_STREAM,
};
use crate::model::checkpoint::RngState;
use crate::train::{fit, scaled_lr, OptimConfig, TrainLog};

/// Hidden/visible partition of the `M` patches of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub num_patches: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskPlan {
    pub fn from_masked(num_patches: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.is_empty() {
            return Err(Error::EmptyMask("mask plan hides no patch"));
        }
        if masked.len() >= num_patches || masked.iter().any(|&p| p >= num_patches) {
            return Err(Error::Shape(format!(
                "mask {masked:?} invalid for {num_patches} patches"
            )));
        }
        let visible = (0..num_patches).filter(|p| masked.binary_search(p).is_err()).collect();
        Ok(Self {
            num_patches,
            masked,
            visible,
        })
    }

    /// 0/1 row with ones at hidden patches.
    pub fn mask_row(&self) -> Vec<f32> {
        let mut row = vec![0.0; self.num_patches];
        for &p in &self.masked {
            row[p] = 1.0;
        }
        row
    }
}

/// Hides `max(1, floor(ratio * M))` patches drawn uniformly without replacement.
pub fn sample_patch_mask(num_patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if num_patches < 2 {
        return Err(Error::Config("masking needs at least two patches".into()));
    }
    let count = ((ratio * num_patches as f64).floor() as usize).max(1);
    let masked = index::sample(rng, num_patches, count).into_vec();
    MaskPlan::from_masked(num_patches, masked)
}

/// Stacks plans into a `B × M` 0/1 tensor (1 = hidden).
pub fn plans_to_tensor(plans: &[MaskPlan], device: &Device) -> Result<Tensor> {
    let m = plans.first().map_or(0, |p| p.num_patches);
    let data: Vec<f32> = plans.iter().flat_map(MaskPlan::mask_row).collect();
    Ok(Tensor::from_vec(data, (plans.len(), m), device)?)
}

/// How the alignment targets for hidden patches are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Encode the hidden patches as their own visible set.
    MaskedSet,
    /// Encode the full image and read off the hidden rows.
    FullImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPretrainConfig {
    pub mask_ratio: f64,
    /// Weight of the latent alignment term.
    pub lambda: f64,
    /// Learning rate per 256 samples; the effective rate scales with batch size.
    pub base_lr: f64,
    pub optim: OptimConfig,
    pub target_mode: TargetMode,
}

impl Default for VisualPretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.45,
            lambda: 0.05,
            base_lr: 1.5e-4,
            optim: OptimConfig {
                epochs: 30,
                batch_size: 64,
                warmup_epochs: 0.5,
                weight_decay: 0.05,
                ..Default::default()
            },
            target_mode: TargetMode::MaskedSet,
        }
    }
}

/// Latent contextual regressor plus pixel decoder.
#[derive(Debug, Clone)]
pub struct MimHead {
    mask_query: Tensor,
    regressor: Vec<CrossBlock>,
    regressor_norm: LayerNorm,
    decoder: Vec<SelfBlock>,
    decoder_norm: LayerNorm,
    pixel_proj: Linear,
}

impl MimHead {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let e = cfg.enc_dim;
        let regressor = (0..cfg.regressor_layers)
            .map(|i| CrossBlock::new(init, &format!("mim.regressor.{i}"), e, cfg.enc_heads, cfg.mlp_ratio, 0.0))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.pixel_decoder_layers)
            .map(|i| SelfBlock::new(init, &format!("mim.decoder.{i}"), e, cfg.enc_heads, cfg.mlp_ratio, 0.0))
            .collect::<Result<_>>()?;
        Ok(Self {
            mask_query: init.normal("mim.mask_query", &[1, 1, e], 0.02)?,
            regressor,
            regressor_norm: LayerNorm::new(init, "mim.regressor_norm", e)?,
            decoder,
            decoder_norm: LayerNorm::new(init, "mim.decoder_norm", e)?,
            pixel_proj: linear(init, "mim.pixel_proj", e, cfg.patch_dim())?,
        })
    }

    /// Predicts representations for hidden patches from visible ones.
    ///
    /// `f` is `B × M × E` encoder output (only visible rows are read), `masked`
    /// is `B × M`. Returns `B × M × E`; rows at hidden positions are the predictions.
    pub fn regress(&self, f: &Tensor, masked: &Tensor, pos: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (b, m, e) = f.dims3()?;
        let visible = (1.0 - masked)?;
        let bias = key_bias(&visible)?;
        let context = f.broadcast_add(pos)?;
        let mut q = self
            .mask_query
            .broadcast_add(pos)?
            .broadcast_as((b, m, e))?
            .contiguous()?;
        for block in &self.regressor {
            q = block.forward(&q, &context, Some(&bias), ctx)?;
        }
        self.regressor_norm.forward(&q)
    }

    /// Maps predicted hidden representations to normalized patch pixels, `B × M × P`.
    /// Hidden rows only attend to each other.
    pub fn reconstruct(&self, z: &Tensor, masked: &Tensor, pos: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let bias = key_bias(masked)?;
        let mut x = z.broadcast_add(pos)?;
        for block in &self.decoder {
            x = block.forward(&x, Some(&bias), ctx)?;
        }
        Ok(self.pixel_proj.forward(&self.decoder_norm.forward(&x)?)?)
    }
}

/// Encoder plus MIM head, owning their parameters.
pub struct VisualPretrainer {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: MimHead,
}

pub struct MimOutput {
    pub loss: Loss,
    pub pred_pixels: Tensor,
    pub target_pixels: Tensor,
}

impl VisualPretrainer {
    pub fn new(cfg: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(device.clone());
        // Same init stream as `MaskOcr`, so the encoder matches a scratch model's.
        let encoder = Encoder::new(cfg, &mut store.init(seed ^ 0x0e0c))?;
        let head = MimHead::new(cfg, &mut store.init(seed ^ MIM_STREAM))?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            head,
        })
    }

    /// Restores encoder (and, if present, MIM head) parameters from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let me = Self::new(&ck.config, ck.rng.seed, device)?;
        ck.load_into(&me.store, &[ENCODER_PREFIX, MIM_PREFIX])?;
        Ok(me)
    }

    /// Alignment targets: encoder representations of the hidden patches, gradient-blocked.
    pub fn target_reps(&self, patches: &Tensor, masked: &Tensor, mode: TargetMode) -> Result<Tensor> {
        let mut ctx = Ctx::eval();
        let out = match mode {
            TargetMode::MaskedSet => self.encoder.forward(patches, Some(masked), &mut ctx)?,
            TargetMode::FullImage => self.encoder.forward(patches, None, &mut ctx)?,
        };
        Ok(out.detach())
    }

    /// Full objective for one batch under the given masks.
    pub fn mim_step(
        &self,
        images: &Tensor,
        masked: &Tensor,
        lambda: f64,
        mode: TargetMode,
        ctx: &mut Ctx,
    ) -> Result<MimOutput> {
        let patches = patchify(images, self.cfg.patch_width)?;
        let visible = (1.0 - masked)?;
        let f = self.encoder.forward(&patches, Some(&visible), ctx)?;
        let pos = self.encoder.pos_embed();
        let z = self.head.regress(&f, masked, pos, ctx)?;
        let z_target = self.target_reps(&patches, masked, mode)?;
        let pred_pixels = self.head.reconstruct(&z, masked, pos, ctx)?;
        let target_pixels = patch_pixel_target(&patches)?;
        let loss = mim_loss(&pred_pixels, &target_pixels, &z, &z_target, masked, lambda)?;
        Ok(MimOutput {
            loss,
            pred_pixels,
            target_pixels,
        })
    }

    /// Trains encoder and MIM head; images only, labels are ignored.
    pub fn train(
        &mut self,
        data: &PreparedSet,
        cfg: &VisualPretrainConfig,
        seed: u64,
        log: &mut TrainLog,
    ) -> Result<()> {
        let mut optim = cfg.optim.clone();
        optim.lr = scaled_lr(cfg.base_lr, optim.batch_size);
        let vars = self.store.vars_with_prefix(&[ENCODER_PREFIX, MIM_PREFIX]);
        let device = self.store.device().clone();
        let m = self.cfg.num_patches();
        let this = &*self;
        fit("visual_pretrain", data.len(), &optim, vars, seed, log, |batch, _, step, ctx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a5c ^ ((step as u64) << 20));
            let plans = batch
                .iter()
                .map(|_| sample_patch_mask(m, cfg.mask_ratio, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let masked = plans_to_tensor(&plans, &device)?;
            let images = data.images(batch, &device)?;
            Ok(this.mim_step(&images, &masked, cfg.lambda, cfg.target_mode, ctx)?.loss)
        }, None)
    }

    pub fn checkpoint(&self, vocab: &str, seed: u64, parent: Option<String>) -> Result<Checkpoint> {
        Checkpoint::from_store(
            &self.store,
            Stage::VisualPretrain,
            &self.cfg,
            vocab,
            RngState { seed, word_pos: 0 },
            parent,
        )
    }

    /// Tiles input, masked input (hidden patches greyed) and reconstruction
    /// vertically for each image. Reconstructed patches are mapped back to
    /// pixels with the true patch mean and standard deviation; visible patches
    /// show the input.
    pub fn reconstruction_triptych(&self, images: &Tensor, mask_ratio: f64, seed: u64) -> Result<Vec<Image>> {
        let (b, c, h, w) = images.dims4()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plans = (0..b)
            .map(|_| sample_patch_mask(self.cfg.num_patches(), mask_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let masked = plans_to_tensor(&plans, images.device())?;
        let out = self.mim_step(images, &masked, 0.0, TargetMode::MaskedSet, &mut Ctx::eval())?;
        let patches = patchify(images, self.cfg.patch_width)?;
        let mean = patches.mean_keepdim(D::Minus1)?;
        let std = patches.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?.sqrt()?;
        let pixels = out.pred_pixels.broadcast_mul(&(std + crate::losses::PATCH_NORM_EPS)?)?.broadcast_add(&mean)?;
        let keep = masked.unsqueeze(D::Minus1)?;
        let recon = (pixels.clamp(0f32, 1f32)?.broadcast_mul(&keep)? + patches.broadcast_mul(&(1.0 - &keep)?)?)?;
        let grey = (patches.broadcast_mul(&(1.0 - &keep)?)? + (keep * 0.5)?.broadcast_as(patches.shape())?)?;
        let recon = unpatchify(&recon, c, h)?.to_vec3_batch()?;
        let grey = unpatchify(&grey, c, h)?.to_vec3_batch()?;
        let input = images.flatten_from(1)?.to_vec2::<f32>()?;
        let mut tiles = Vec::with_capacity(b);
        for i in 0..b {
            let mut tile = Image::filled(c, 3 * h, w, 0.0);
            for (row, src) in [&input[i], &grey[i], &recon[i]].into_iter().enumerate() {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            tile.set(ch, row * h + y, x, src[(ch * h + y) * w + x]);
                        }
                    }
                }
            }
            tiles.push(tile);
        }
        Ok(tiles)
    }
}

trait BatchVec {
    fn to_vec3_batch(&self) -> Result<Vec<Vec<f32>>>;
}

impl BatchVec for Tensor {
    fn to_vec3_batch(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.flatten_from(1)?.to_vec2::<f32>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_patch_mask(32, 0.45, &mut rng).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (14, 18));
        for (ratio, n) in [(0.30, 9), (0.60, 19)] {
            assert_eq!(sample_patch_mask(32, ratio, &mut rng).unwrap().masked.len(), n);
        }
        assert_eq!(sample_patch_mask(2, 0.1, &mut rng).unwrap().masked.len(), 1);
        assert!(sample_patch_mask(1, 0.5, &mut rng).is_err());
        assert!(sample_patch_mask(8, 1.0, &mut rng).is_err());
    }

    #[test]
    fn plans_partition_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = sample_patch_mask(24, 0.45, &mut rng).unwrap();
            let mut all: Vec<_> = p.masked.iter().chain(&p.visible).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..24).collect::<Vec<_>>());
        }
    }

    #[test]
    fn masked_fraction_matches_ratio_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hits = vec![0usize; 40];
        let draws = 2000;
        for _ in 0..draws {
            for p in sample_patch_mask(40, 0.5, &mut rng).unwrap().masked {
                hits[p] += 1;
            }
        }
        // Every position is hidden about half the time.
        for h in hits {
            let frac = h as f64 / draws as f64;
            assert!((frac - 0.5).abs() < 0.05, "{frac}");
        }
    }
}
