//! Stage 2: masked image-language modeling on the decoder.
//!
//! Some characters of a synthetic image are chosen, every patch their boxes
//! touch is hidden from the encoder, and the decoder must predict the hidden
//! characters from the remaining visual context and the language structure it
//! learns. The encoder stays frozen unless explicitly retrained.

use std::collections::BTreeSet;

use candle_core::{Device, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, PreparedSet};
use crate::error::{Error, Result};
use crate::losses::{ctc_loss, masked_char_loss, recognition_loss, Loss};
use crate::model::{Ctx, DecoderKind, MaskOcr, ParamStore, ENCODER_PREFIX};
use crate::train::{fit, OptimConfig, TrainLog};

/// Masked characters of one sample and the patches they induce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharMaskPlan {
    pub masked_chars: Vec<usize>,
    pub masked_patches: Vec<usize>,
    pub visible_patches: Vec<usize>,
}

impl CharMaskPlan {
    /// Hides every patch touched by one of `masked_chars`.
    pub fn new(char_patches: &[Vec<usize>], masked_chars: Vec<usize>, num_patches: usize) -> Result<Self> {
        let mut masked_chars = masked_chars;
        masked_chars.sort_unstable();
        masked_chars.dedup();
        if masked_chars.is_empty() {
            return Err(Error::EmptyMask("no character selected for masking"));
        }
        let mut patches = BTreeSet::new();
        for &c in &masked_chars {
            let cover = char_patches.get(c).ok_or_else(|| {
                Error::Shape(format!("character {c} outside text of length {}", char_patches.len()))
            })?;
            for &p in cover {
                if p >= num_patches {
                    return Err(Error::Shape(format!("patch {p} outside {num_patches} patches")));
                }
                patches.insert(p);
            }
        }
        if patches.len() == num_patches {
            return Err(Error::EmptyMask("masked characters cover every patch"));
        }
        let visible_patches = (0..num_patches).filter(|p| !patches.contains(p)).collect();
        Ok(Self {
            masked_chars,
            masked_patches: patches.into_iter().collect(),
            visible_patches,
        })
    }

    pub fn mask_row(&self, num_patches: usize) -> Vec<f32> {
        let mut row = vec![0.0; num_patches];
        for &p in &self.masked_patches {
            row[p] = 1.0;
        }
        row
    }
}

/// Uniformly picks `max(1, round(ratio * len))` character indices.
pub fn sample_char_mask(len: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptyMask("cannot mask characters of an empty text"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("character mask ratio {ratio} outside (0, 1)")));
    }
    let count = ((ratio * len as f64).round() as usize).clamp(1, len);
    let mut chosen = index::sample(rng, len, count).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Samples a plan for one example, dropping characters from the draw until
/// at least one patch stays visible.
pub fn sample_plan(example: &Example, ratio: f64, num_patches: usize, rng: &mut impl Rng) -> Result<CharMaskPlan> {
    let mut chars = sample_char_mask(example.text.len(), ratio, rng)?;
    loop {
        match CharMaskPlan::new(&example.char_patches, chars.clone(), num_patches) {
            Err(Error::EmptyMask(_)) if chars.len() > 1 => {
                chars.pop();
            }
            other => return other,
        }
    }
}

pub fn plans_to_tensor(plans: &[CharMaskPlan], num_patches: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = plans.iter().flat_map(|p| p.mask_row(num_patches)).collect();
    Ok(Tensor::from_vec(data, (plans.len(), num_patches), device)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguagePretrainConfig {
    pub mask_ratio: f64,
    /// With masking off, the decoder is trained to read the full unmasked image.
    pub masking: bool,
    /// Keep the encoder fixed; turning this off retrains it jointly.
    pub freeze_encoder: bool,
    pub optim: OptimConfig,
}

impl Default for LanguagePretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.15,
            masking: true,
            freeze_encoder: true,
            optim: OptimConfig {
                epochs: 5,
                batch_size: 64,
                lr: 1e-4,
                warmup_epochs: 0.5,
                weight_decay: 0.05,
                ..Default::default()
            },
        }
    }
}

/// Loss of one batch under the given character masks. With `plans` absent the
/// image is shown in full and the whole label is supervised.
pub fn language_step(
    model: &MaskOcr,
    data: &PreparedSet,
    batch: &[usize],
    plans: Option<&[CharMaskPlan]>,
    freeze_encoder: bool,
    ctx: &mut Ctx,
    device: &Device,
) -> Result<Loss> {
    let images = data.images(batch, device)?;
    let labels = data.labels(batch);
    let m = model.cfg.num_patches();
    let encode = |ctx: &mut Ctx| -> Result<Tensor> {
        match plans {
            Some(plans) => model.masked_encode(&images, &plans_to_tensor(plans, m, device)?, ctx),
            None => model.encode(&images, None, ctx),
        }
    };
    let f = if freeze_encoder {
        encode(&mut Ctx::eval())?.detach()
    } else {
        encode(ctx)?
    };
    let logits = model.decode(&f, ctx)?;
    match (model.cfg.decoder, plans) {
        (DecoderKind::Query, Some(plans)) => {
            let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.masked_chars.clone()).collect();
            masked_char_loss(&logits, &labels, &masked)
        }
        (DecoderKind::Query, None) => recognition_loss(&logits, &labels),
        (DecoderKind::Ctc, _) => {
            let targets: Vec<Vec<u32>> = labels.iter().map(|l| l.chars().to_vec()).collect();
            ctc_loss(&logits, &targets, model.cfg.vocab_size as u32)
        }
    }
}

/// Trains the recognition head of `model` on synthetic images with
/// character-level masking. Returns the encoder hash, which is verified to be
/// unchanged when the encoder is frozen.
pub fn pretrain_decoder(
    model: &MaskOcr,
    store: &ParamStore,
    data: &PreparedSet,
    cfg: &LanguagePretrainConfig,
    seed: u64,
    log: &mut TrainLog,
) -> Result<String> {
    if data.examples.iter().any(|e| e.char_boxes.len() != e.text.len()) {
        return Err(Error::Config("language pretraining needs a box per character".into()));
    }
    let before = store.hash(&[ENCODER_PREFIX])?;
    let vars = if cfg.freeze_encoder {
        store.vars_with_prefix(&[model.head_prefix()])
    } else {
        store.all_vars()
    };
    let device = store.device().clone();
    let m = model.cfg.num_patches();
    let stage = match model.cfg.decoder {
        DecoderKind::Query => "language_pretrain",
        DecoderKind::Ctc => "language_pretrain_ctc",
    };
    fit(stage, data.len(), &cfg.optim, vars, seed, log, |batch, _, step, ctx| {
        let plans = if cfg.masking {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a96 ^ ((step as u64) << 20));
            Some(
                batch
                    .iter()
                    .map(|&i| sample_plan(&data.examples[i], cfg.mask_ratio, m, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        language_step(model, data, batch, plans.as_deref(), cfg.freeze_encoder, ctx, &device)
    }, None)?;
    let after = store.hash(&[ENCODER_PREFIX])?;
    if cfg.freeze_encoder && after != before {
        return Err(Error::FrozenDrift(format!("encoder hash {before} became {after}")));
    }
    Ok(after)
}

/// Fraction of masked characters predicted correctly under fresh masks drawn from `seed`.
pub fn masked_char_accuracy(
    model: &MaskOcr,
    data: &PreparedSet,
    ratio: f64,
    batch_size: usize,
    seed: u64,
    device: &Device,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = model.cfg.num_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    let order: Vec<usize> = (0..data.len()).collect();
    for batch in order.chunks(batch_size.max(1)) {
        let plans = batch
            .iter()
            .map(|&i| sample_plan(&data.examples[i], ratio, m, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let images = data.images(batch, device)?;
        let mut ctx = Ctx::eval();
        let f = model.masked_encode(&images, &plans_to_tensor(&plans, m, device)?, &mut ctx)?;
        let pred = crate::model::argmax_ids(&model.decode(&f, &mut ctx)?)?;
        for ((&i, plan), row) in batch.iter().zip(&plans).zip(&pred) {
            for &c in &plan.masked_chars {
                hits += usize::from(row[c] == data.examples[i].label.ids[c]);
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_char_mask(7, 0.15, &mut rng).unwrap().len(), 1);
        assert_eq!(sample_char_mask(20, 0.15, &mut rng).unwrap().len(), 3);
        assert_eq!(sample_char_mask(1, 0.15, &mut rng).unwrap(), vec![0]);
        assert!(sample_char_mask(0, 0.15, &mut rng).is_err());
        assert!(sample_char_mask(3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn plan_takes_union_of_char_patches() {
        let cover = vec![vec![0, 1], vec![1, 2], vec![4]];
        let p = CharMaskPlan::new(&cover, vec![2, 0], 6).unwrap();
        assert_eq!(p.masked_chars, vec![0, 2]);
        assert_eq!(p.masked_patches, vec![0, 1, 4]);
        assert_eq!(p.visible_patches, vec![2, 3, 5]);
        assert_eq!(p.mask_row(6), vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(CharMaskPlan::new(&cover, vec![], 6).is_err());
        assert!(CharMaskPlan::new(&cover, vec![3], 6).is_err());
        assert!(CharMaskPlan::new(&cover, vec![0, 1], 3).is_err());
    }
}
