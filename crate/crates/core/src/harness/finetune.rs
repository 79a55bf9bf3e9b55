//! Supervised finetuning of the whole recognizer and linear probing of its classifier.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport, Normalization};
use crate::data::{AugmentConfig, LabelSeq, PreparedSet, Vocab};
use crate::error::{Error, Result};
use crate::losses::{ctc_loss, recognition_loss, Loss};
use crate::model::layers::linear;
use crate::model::{Ctx, Head, MaskOcr, ParamStore};
use crate::train::{fit, OptimConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// `optim.lr` is ignored; the rate comes from `lr_scratch` / `lr_pretrained`.
    pub optim: OptimConfig,
    pub lr_scratch: f64,
    pub lr_pretrained: f64,
    pub augment: AugmentConfig,
    pub eval_batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                epochs: 20,
                batch_size: 64,
                warmup_epochs: 0.5,
                weight_decay: 0.05,
                ..Default::default()
            },
            lr_scratch: 1e-3,
            lr_pretrained: 1e-4,
            augment: AugmentConfig::default(),
            eval_batch_size: 128,
        }
    }
}

impl FinetuneConfig {
    pub fn lr_for(&self, pretrained: bool) -> f64 {
        if pretrained {
            self.lr_pretrained
        } else {
            self.lr_scratch
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub lr: f64,
    /// Validation accuracy after each epoch (empty without a validation set).
    pub val_curve: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

/// Sequence loss matching the model's head.
pub fn supervised_loss(model: &MaskOcr, logits: &Tensor, labels: &[LabelSeq]) -> Result<Loss> {
    match model.head {
        Head::Query(_) => recognition_loss(logits, labels),
        Head::Ctc(_) => {
            let targets: Vec<Vec<u32>> = labels.iter().map(|l| l.chars().to_vec()).collect();
            ctc_loss(logits, &targets, model.cfg.vocab_size as u32)
        }
    }
}

/// Trains every parameter on labeled data. With a validation set, the
/// parameters of the best validation epoch (earliest on ties) are restored at the end.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &MaskOcr,
    store: &ParamStore,
    train: &PreparedSet,
    val: Option<&PreparedSet>,
    vocab: &Vocab,
    norm: &Normalization,
    cfg: &FinetuneConfig,
    pretrained: bool,
    seed: u64,
    log: &mut TrainLog,
) -> Result<FinetuneOutcome> {
    let device = store.device().clone();
    let mut optim = cfg.optim.clone();
    optim.lr = cfg.lr_for(pretrained);
    let mut best: Option<(f64, usize, _)> = None;
    let mut curve = Vec::new();
    let mut hook = |epoch: usize| -> Result<()> {
        if let Some(val) = val {
            let acc = evaluate(model, val, vocab, norm, cfg.eval_batch_size, &device)?.accuracy;
            curve.push(acc);
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                best = Some((acc, epoch, store.snapshot()?));
            }
        }
        Ok(())
    };
    fit(
        "finetune",
        train.len(),
        &optim,
        store.all_vars(),
        seed,
        log,
        |batch, epoch, _, ctx| {
            let images = train.images_augmented(batch, &device, Some((&cfg.augment, seed, epoch)))?;
            let logits = model.forward_recognize(&images, ctx)?;
            supervised_loss(model, &logits, &train.labels(batch))
        },
        Some(&mut hook),
    )?;
    let best_epoch = match best {
        Some((_, epoch, snapshot)) => {
            store.restore(&snapshot)?;
            Some(epoch)
        }
        None => None,
    };
    Ok(FinetuneOutcome {
        lr: optim.lr,
        val_curve: curve,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub optim: OptimConfig,
    /// Re-draw the classifier before training, so every probe starts from the same kind of head.
    pub reinit_classifier: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                epochs: 20,
                batch_size: 64,
                lr: 1e-2,
                warmup_epochs: 0.5,
                weight_decay: 0.0,
                ..Default::default()
            },
            reinit_classifier: true,
        }
    }
}

/// Head features for every example, computed once with all layers frozen.
fn cached_features(model: &MaskOcr, data: &PreparedSet, batch_size: usize, device: &Device) -> Result<Tensor> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for batch in indices.chunks(batch_size.max(1)) {
        let mut ctx = Ctx::eval();
        let f = model.encode(&data.images(batch, device)?, None, &mut ctx)?;
        parts.push(model.head_features(&f, &mut ctx)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Trains only the final linear classifier on frozen features and reports test accuracy.
/// Returns an error if any other parameter moved.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    model: &MaskOcr,
    store: &ParamStore,
    train: &PreparedSet,
    test: &PreparedSet,
    vocab: &Vocab,
    norm: &Normalization,
    cfg: &ProbeConfig,
    seed: u64,
    log: &mut TrainLog,
) -> Result<EvalReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let device = store.device().clone();
    let classifier = model.classifier_prefix();
    // Full parameter names double as prefixes; none of them prefixes a classifier name.
    let others: Vec<&str> = store.names().filter(|n| !n.starts_with(classifier)).collect();
    let before = store.hash(&others)?;
    if cfg.reinit_classifier {
        let (fan_in, fan_out) = match &model.head {
            Head::Query(_) => (model.cfg.dec_dim, model.cfg.vocab_size),
            Head::Ctc(_) => (model.cfg.enc_dim, model.cfg.vocab_size + 1),
        };
        let mut fresh = ParamStore::new(device.clone());
        linear(&mut fresh.init(seed ^ 0x9b0e), classifier.trim_end_matches('.'), fan_in, fan_out)?;
        store.copy_from(&fresh, &[classifier])?;
    }
    let features = cached_features(model, train, 256, &device)?;
    fit(
        "linear_probe",
        train.len(),
        &cfg.optim,
        store.vars_with_prefix(&[classifier]),
        seed,
        log,
        |batch, _, _, _| {
            let idx = Tensor::from_vec(batch.iter().map(|&i| i as u32).collect::<Vec<_>>(), batch.len(), &device)?;
            let logits = model.classify(&features.index_select(&idx, 0)?)?;
            supervised_loss(model, &logits, &train.labels(batch))
        },
        None,
    )?;
    if store.hash(&others)? != before {
        return Err(Error::FrozenDrift("a non-classifier parameter changed during probing".into()));
    }
    evaluate(model, test, vocab, norm, 256, &device)
}
