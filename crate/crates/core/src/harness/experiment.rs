//! Stage pipelines: pretraining, finetuning, probing and evaluation chained
//! through in-memory state, with the checkpoint contracts between them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{AppConfig, DataKind};
use super::eval::{evaluate, EvalReport};
use super::finetune::{finetune, linear_probe};
use crate::data::{PreparedSet, Vocab};
use crate::error::{Error, Result};
use crate::model::checkpoint::RngState;
use crate::model::{Checkpoint, DecoderKind, MaskOcr, ParamStore, Stage, ENCODER_PREFIX};
use crate::pretrain::language::pretrain_decoder;
use crate::pretrain::VisualPretrainer;
use crate::synth::{Manifest, MANIFEST_NAME};
use crate::train::TrainLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    PretrainVisual,
    PretrainLanguage,
    Finetune,
    LinearProbe,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    Scratch,
    Checkpoint(PathBuf),
}

/// Per-experiment changes to the base configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub visual_mask_ratio: Option<f64>,
    pub language_masking: Option<bool>,
    pub freeze_encoder: Option<bool>,
    pub patch_width: Option<usize>,
    pub decoder: Option<DecoderKind>,
}

impl Overrides {
    pub fn apply(&self, base: &AppConfig) -> Result<AppConfig> {
        let mut cfg = base.clone();
        if let Some(r) = self.visual_mask_ratio {
            cfg.visual.mask_ratio = r;
        }
        if let Some(m) = self.language_masking {
            cfg.language.masking = m;
        }
        if let Some(f) = self.freeze_encoder {
            cfg.language.freeze_encoder = f;
        }
        if let Some(p) = self.patch_width {
            cfg.model.patch_width = p;
        }
        if let Some(d) = self.decoder {
            cfg.model.decoder = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub stages: Vec<StageKind>,
    pub init: InitSource,
    pub seeds: Vec<u64>,
    /// Permits language pretraining on an encoder that never saw visual pretraining.
    #[serde(default)]
    pub allow_language_without_visual: bool,
    #[serde(default)]
    pub overrides: Overrides,
}

impl ExperimentSpec {
    pub fn new(name: &str, stages: &[StageKind]) -> Self {
        Self {
            name: name.to_string(),
            stages: stages.to_vec(),
            init: InitSource::Scratch,
            seeds: vec![0],
            allow_language_without_visual: false,
            overrides: Overrides::default(),
        }
    }

    /// Checks that the stages form a valid chain: pretraining before
    /// supervised stages, each stage at most once, language pretraining on a
    /// visually pretrained encoder unless explicitly allowed, and evaluation
    /// only of something trained or loaded.
    pub fn validate(&self, init_stage: Option<Stage>) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(format!("experiment {}: no stages", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config(format!("experiment {}: no seeds", self.name)));
        }
        for w in self.stages.windows(2) {
            let ordered = w[0] < w[1] || (w[0] == StageKind::Finetune && w[1] == StageKind::LinearProbe);
            if !ordered || w[0] == w[1] {
                return Err(Error::Config(format!(
                    "experiment {}: stage {:?} cannot follow {:?}",
                    self.name, w[1], w[0]
                )));
            }
        }
        let visual_parent = self.stages.contains(&StageKind::PretrainVisual)
            || matches!(init_stage, Some(s) if s != Stage::Init);
        if self.stages.contains(&StageKind::PretrainLanguage) && !visual_parent && !self.allow_language_without_visual {
            return Err(Error::Config(format!(
                "experiment {}: language pretraining needs a visually pretrained encoder",
                self.name
            )));
        }
        if self.stages == [StageKind::Eval] && init_stage.is_none() {
            return Err(Error::Config(format!(
                "experiment {}: evaluating an untrained model",
                self.name
            )));
        }
        Ok(())
    }
}

/// The five toy sets of one seed.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub synthetic: PreparedSet,
    pub unlabeled: PreparedSet,
    pub labeled: PreparedSet,
    pub val: PreparedSet,
    pub test: PreparedSet,
}

impl Datasets {
    pub fn build(cfg: &AppConfig, seed: u64) -> Result<Self> {
        let b = |k| cfg.data.build(k, &cfg.model, seed);
        Ok(Self {
            synthetic: b(DataKind::Synthetic)?,
            unlabeled: b(DataKind::Unlabeled)?,
            labeled: b(DataKind::Labeled)?,
            val: b(DataKind::Val)?,
            test: b(DataKind::Test)?,
        })
    }
}

/// Reads a dataset directory (or manifest file) written by `synthesize`.
pub fn load_prepared(path: &Path, cfg: &AppConfig) -> Result<PreparedSet> {
    let manifest = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let m = Manifest::read(&manifest)?;
    cfg.data.prepare(&m.load_all()?, &cfg.model)
}

/// A model under training plus its provenance.
pub struct Pipeline {
    pub cfg: AppConfig,
    pub vocab: Vocab,
    pub model: MaskOcr,
    pub store: ParamStore,
    pub stage: Stage,
    pub parent_hash: Option<String>,
    /// Whether any pretraining preceded (selects the finetuning learning rate).
    pub pretrained: bool,
    pub seed: u64,
}

impl Pipeline {
    pub fn scratch(cfg: &AppConfig, seed: u64, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(device.clone());
        let model = MaskOcr::new(&cfg.model, &mut store, seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab: cfg.data.vocab()?,
            model,
            store,
            stage: Stage::Init,
            parent_hash: None,
            pretrained: false,
            seed,
        })
    }

    /// Starts from a checkpoint: every stored parameter the model has is loaded.
    pub fn from_checkpoint(cfg: &AppConfig, ck: &Checkpoint, seed: u64, device: &Device) -> Result<Self> {
        let vocab = cfg.data.vocab()?;
        if ck.vocab != vocab.chars().iter().collect::<String>() {
            return Err(Error::Checkpoint(format!(
                "checkpoint vocabulary {:?} differs from the configured {:?}",
                ck.vocab, cfg.data.alphabet
            )));
        }
        cfg.model.compatible_with(&ck.config)?;
        let mut p = Self::scratch(cfg, seed, device)?;
        let names: Vec<String> = p.store.names().map(str::to_string).collect();
        for name in names {
            if let Some((shape, data)) = ck.tensors.get(&name) {
                let t = Tensor::from_vec(data.clone(), shape.as_slice(), device)?;
                p.store.set(&name, &t)?;
            }
        }
        p.stage = ck.stage;
        p.parent_hash = Some(ck.content_hash()?);
        p.pretrained = ck.stage != Stage::Init;
        Ok(p)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(
            &self.store,
            self.stage,
            &self.model.cfg,
            &self.vocab.chars().iter().collect::<String>(),
            RngState {
                seed: self.seed,
                word_pos: 0,
            },
            self.parent_hash.clone(),
        )
    }

    fn advance(&mut self, stage: Stage) -> Result<()> {
        self.parent_hash = Some(self.checkpoint()?.content_hash()?);
        self.stage = stage;
        Ok(())
    }

    /// Masked image modeling on unlabeled images; copies the encoder back.
    /// Returns the pretrainer (encoder plus MIM head) for checkpointing.
    pub fn pretrain_visual(&mut self, data: &PreparedSet, log: &mut TrainLog) -> Result<VisualPretrainer> {
        let device = self.store.device().clone();
        let mut vp = VisualPretrainer::new(&self.cfg.model, self.seed, &device)?;
        vp.store.copy_from(&self.store, &[ENCODER_PREFIX])?;
        vp.train(data, &self.cfg.visual, self.seed ^ 0x7155, log)?;
        self.store.copy_from(&vp.store, &[ENCODER_PREFIX])?;
        self.advance(Stage::VisualPretrain)?;
        self.pretrained = true;
        Ok(vp)
    }

    /// Masked image-language modeling on synthetic images.
    pub fn pretrain_language(&mut self, data: &PreparedSet, log: &mut TrainLog) -> Result<()> {
        pretrain_decoder(&self.model, &self.store, data, &self.cfg.language, self.seed ^ 0x1a9e, log)?;
        self.advance(Stage::LanguagePretrain)?;
        self.pretrained = true;
        Ok(())
    }

    pub fn finetune(&mut self, train: &PreparedSet, val: Option<&PreparedSet>, log: &mut TrainLog) -> Result<super::finetune::FinetuneOutcome> {
        let out = finetune(
            &self.model,
            &self.store,
            train,
            val,
            &self.vocab,
            &self.cfg.eval,
            &self.cfg.finetune,
            self.pretrained,
            self.seed ^ 0xf17e,
            log,
        )?;
        self.advance(Stage::Finetune)?;
        Ok(out)
    }

    pub fn probe(&mut self, train: &PreparedSet, test: &PreparedSet, log: &mut TrainLog) -> Result<EvalReport> {
        let r = linear_probe(
            &self.model,
            &self.store,
            train,
            test,
            &self.vocab,
            &self.cfg.eval,
            &self.cfg.probe,
            self.seed ^ 0x960b,
            log,
        )?;
        self.advance(Stage::LinearProbe)?;
        Ok(r)
    }

    pub fn evaluate(&self, data: &PreparedSet) -> Result<EvalReport> {
        evaluate(
            &self.model,
            data,
            &self.vocab,
            &self.cfg.eval,
            self.cfg.finetune.eval_batch_size,
            self.store.device(),
        )
    }
}

/// Outcome of one experiment under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub experiment: String,
    pub seed: u64,
    /// Test accuracy of the final model (after finetuning or probing).
    pub accuracy: f64,
    pub test_count: usize,
    pub final_stage: Stage,
    pub encoder_hash: String,
    pub stage_hashes: BTreeMap<String, String>,
}

/// Parameter values after a stage prefix, so experiments sharing a prefix
/// (e.g. V and V+L share visual pretraining) train it once.
#[derive(Default)]
pub struct StageCache {
    entries: BTreeMap<String, (BTreeMap<String, Tensor>, Stage, Option<String>, bool)>,
}

impl StageCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Runs the experiment's stages for one seed on prebuilt data.
pub fn run_experiment(
    spec: &ExperimentSpec,
    base: &AppConfig,
    seed: u64,
    data: &Datasets,
    device: &Device,
    cache: &mut StageCache,
    log: &mut TrainLog,
) -> Result<RunResult> {
    let cfg = spec.overrides.apply(base)?;
    let mut p = match &spec.init {
        InitSource::Scratch => Pipeline::scratch(&cfg, seed, device)?,
        InitSource::Checkpoint(path) => Pipeline::from_checkpoint(&cfg, &Checkpoint::load(path)?, seed, device)?,
    };
    spec.validate(match spec.init {
        InitSource::Scratch => None,
        InitSource::Checkpoint(_) => Some(p.stage),
    })?;
    let cfg_hash = cfg.content_hash()?;
    let mut stage_hashes = BTreeMap::new();
    let mut accuracy = None;
    let mut prefix = format!("{cfg_hash}/{seed}/{:?}", spec.init);
    for &stage in &spec.stages {
        prefix.push_str(&format!("/{stage:?}"));
        if matches!(stage, StageKind::PretrainVisual | StageKind::PretrainLanguage) {
            if let Some((snap, st, parent, pre)) = cache.entries.get(&prefix) {
                p.store.restore(snap)?;
                p.stage = *st;
                p.parent_hash = parent.clone();
                p.pretrained = *pre;
                stage_hashes.insert(format!("{stage:?}"), p.store.hash(&[""])?);
                continue;
            }
        }
        match stage {
            StageKind::PretrainVisual => {
                p.pretrain_visual(&data.unlabeled, log)?;
            }
            StageKind::PretrainLanguage => p.pretrain_language(&data.synthetic, log)?,
            StageKind::Finetune => {
                p.finetune(&data.labeled, Some(&data.val), log)?;
                accuracy = Some(p.evaluate(&data.test)?);
            }
            StageKind::LinearProbe => accuracy = Some(p.probe(&data.labeled, &data.test, log)?),
            StageKind::Eval => accuracy = Some(p.evaluate(&data.test)?),
        }
        if matches!(stage, StageKind::PretrainVisual | StageKind::PretrainLanguage) {
            cache
                .entries
                .insert(prefix.clone(), (p.store.snapshot()?, p.stage, p.parent_hash.clone(), p.pretrained));
        }
        stage_hashes.insert(format!("{stage:?}"), p.store.hash(&[""])?);
    }
    let report = match accuracy {
        Some(r) => r,
        None => p.evaluate(&data.test)?,
    };
    Ok(RunResult {
        experiment: spec.name.clone(),
        seed,
        accuracy: report.accuracy,
        test_count: report.count,
        final_stage: p.stage,
        encoder_hash: p.store.hash(&[ENCODER_PREFIX])?,
        stage_hashes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use StageKind::*;

    #[test]
    fn chain_validation() {
        assert!(ExperimentSpec::new("v+l", &[PretrainVisual, PretrainLanguage, Finetune, Eval]).validate(None).is_ok());
        assert!(ExperimentSpec::new("bad", &[Finetune, PretrainVisual]).validate(None).is_err());
        assert!(ExperimentSpec::new("dup", &[Finetune, Finetune]).validate(None).is_err());
        let l_only = ExperimentSpec::new("l", &[PretrainLanguage, Finetune]);
        assert!(l_only.validate(None).is_err());
        assert!(l_only.validate(Some(Stage::VisualPretrain)).is_ok());
        let allowed = ExperimentSpec {
            allow_language_without_visual: true,
            ..l_only
        };
        assert!(allowed.validate(None).is_ok());
        assert!(ExperimentSpec::new("e", &[Eval]).validate(None).is_err());
        assert!(ExperimentSpec::new("e", &[Eval]).validate(Some(Stage::Finetune)).is_ok());
    }
}
