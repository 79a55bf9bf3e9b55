use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskocr::harness::experiment::load_prepared;
use maskocr::harness::{AppConfig, DataKind, Pipeline, Runner, Suite};
use maskocr::model::{Checkpoint, Stage};
use maskocr::pretrain::VisualPretrainer;
use maskocr::synth::build_dataset;
use maskocr::train::TrainLog;

#[derive(Parser)]
#[command(name = "maskocr", about = "Masked pretraining for text recognition at toy scale")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; the shipped default is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Compute device: "cpu" or "cuda:N".
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Synthetic,
    Unlabeled,
    Labeled,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Render toy datasets (PNG images plus manifest) under <out>/<kind>.
    Synthesize {
        #[arg(long, value_enum, default_value = "all")]
        kind: KindArg,
        /// Number of samples; defaults to the configured size of each set.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Masked image modeling on unlabeled images; writes <out>/encoder.ckpt.
    PretrainEncoder {
        #[arg(long)]
        data: PathBuf,
    },
    /// Masked image-language modeling on synthetic images; writes <out>/decoder.ckpt.
    PretrainDecoder {
        /// Visually pretrained checkpoint; omit only with --allow-scratch-encoder.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Permit a randomly initialized (frozen) encoder.
        #[arg(long)]
        allow_scratch_encoder: bool,
        /// Update the encoder too instead of keeping it fixed.
        #[arg(long)]
        retrain_encoder: bool,
        /// Show full images and supervise the whole text instead of masking.
        #[arg(long)]
        no_mask: bool,
    },
    /// Supervised training of all parameters; writes <out>/finetune.ckpt.
    Finetune {
        /// Starting checkpoint; scratch when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Trains only the final classifier on frozen features; writes <out>/probe.ckpt.
    Probe {
        /// Checkpoint to probe; random weights when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Sequence accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Runs ablation suites on in-memory toy data; reports under <out>/<suite>.
    Ablate {
        /// Suite names (comma separated) or "all".
        #[arg(long, default_value = "vl_table")]
        suite: String,
        /// Comma-separated seeds; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Writes input / masked input / reconstruction triptychs of an encoder checkpoint.
    ReconstructDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Prints the effective configuration as TOML.
    ShowConfig,
}

fn parse_device(s: &str) -> Result<Device> {
    if s == "cpu" {
        return Ok(Device::Cpu);
    }
    if let Some(id) = s.strip_prefix("cuda:") {
        let id: usize = id.parse().context("device ordinal")?;
        return Ok(Device::new_cuda(id)?);
    }
    bail!("unknown device {s:?} (expected cpu or cuda:N)")
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| path.display().to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default_config(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let device = parse_device(&g.device)?;
    let out = &g.out;
    fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let seed = cfg.seed;
    let log_path = out.join("train_log.jsonl");
    match &cli.command {
        Command::Synthesize { kind, size } => {
            let kinds: Vec<DataKind> = match kind {
                KindArg::All => DataKind::ALL.to_vec(),
                KindArg::Synthetic => vec![DataKind::Synthetic],
                KindArg::Unlabeled => vec![DataKind::Unlabeled],
                KindArg::Labeled => vec![DataKind::Labeled],
                KindArg::Val => vec![DataKind::Val],
                KindArg::Test => vec![DataKind::Test],
            };
            let fonts = cfg.data.fonts()?;
            for k in kinds {
                let spec = cfg.data.dataset_spec(k, &cfg.model);
                let n = size.unwrap_or(cfg.data.sizes.of(k));
                let path = build_dataset(&spec, &fonts, n, &out.join(k.name()), cfg.data.dataset_seed(k, seed))?;
                log::info!("{}: {n} samples -> {}", k.name(), path.display());
            }
        }
        Command::PretrainEncoder { data } => {
            let set = load_prepared(data, &cfg)?;
            let mut p = Pipeline::scratch(&cfg, seed, &device)?;
            let mut log = TrainLog::to_file(&log_path)?;
            let vp = p.pretrain_visual(&set, &mut log)?;
            let ck = vp.checkpoint(&cfg.data.alphabet, seed, p.parent_hash.clone())?;
            ck.save(&out.join("encoder.ckpt"))?;
            log::info!("encoder checkpoint {}", ck.content_hash()?);
        }
        Command::PretrainDecoder {
            encoder,
            data,
            allow_scratch_encoder,
            retrain_encoder,
            no_mask,
        } => {
            cfg.language.freeze_encoder = !retrain_encoder;
            cfg.language.masking = !no_mask;
            let mut p = match encoder {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    if ck.stage != Stage::VisualPretrain && !allow_scratch_encoder {
                        bail!("{} is a {} checkpoint, expected visual_pretrain", path.display(), ck.stage);
                    }
                    Pipeline::from_checkpoint(&cfg, &ck, seed, &device)?
                }
                None if *allow_scratch_encoder => Pipeline::scratch(&cfg, seed, &device)?,
                None => bail!("--encoder is required unless --allow-scratch-encoder is given"),
            };
            let set = load_prepared(data, &cfg)?;
            let mut log = TrainLog::to_file(&log_path)?;
            p.pretrain_language(&set, &mut log)?;
            let ck = p.checkpoint()?;
            ck.save(&out.join("decoder.ckpt"))?;
            log::info!("decoder checkpoint {}", ck.content_hash()?);
        }
        Command::Finetune { init, train, val, test } => {
            let mut p = match init {
                Some(path) => Pipeline::from_checkpoint(&cfg, &Checkpoint::load(path)?, seed, &device)?,
                None => Pipeline::scratch(&cfg, seed, &device)?,
            };
            let train = load_prepared(train, &cfg)?;
            let val = val.as_ref().map(|v| load_prepared(v, &cfg)).transpose()?;
            let mut log = TrainLog::to_file(&log_path)?;
            let outcome = p.finetune(&train, val.as_ref(), &mut log)?;
            p.checkpoint()?.save(&out.join("finetune.ckpt"))?;
            let report = test.as_ref().map(|t| p.evaluate(&load_prepared(t, &cfg)?)).transpose()?;
            let summary = serde_json::json!({ "finetune": outcome, "test": report });
            write_json(&out.join("finetune_report.json"), &summary)?;
            println!("{summary}");
        }
        Command::Probe { init, train, test } => {
            let mut p = match init {
                Some(path) => Pipeline::from_checkpoint(&cfg, &Checkpoint::load(path)?, seed, &device)?,
                None => Pipeline::scratch(&cfg, seed, &device)?,
            };
            let mut log = TrainLog::to_file(&log_path)?;
            let report = p.probe(&load_prepared(train, &cfg)?, &load_prepared(test, &cfg)?, &mut log)?;
            p.checkpoint()?.save(&out.join("probe.ckpt"))?;
            write_json(&out.join("probe_report.json"), &report)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Eval { ckpt, data } => {
            let p = Pipeline::from_checkpoint(&cfg, &Checkpoint::load(ckpt)?, seed, &device)?;
            let report = p.evaluate(&load_prepared(data, &cfg)?)?;
            write_json(&out.join("eval_report.json"), &report)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Ablate { suite, seeds } => {
            let suites: Vec<Suite> = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                suite.split(',').map(|s| Suite::parse(s.trim())).collect::<maskocr::Result<_>>()?
            };
            let seeds = seeds.clone().unwrap_or_else(|| cfg.ablation.seeds.clone());
            let mut runner = Runner::new(device, Some(out.clone()));
            for s in suites {
                let report = runner.run_suite(s, &cfg, &seeds)?;
                print!("{}", report.summary_table());
            }
        }
        Command::ReconstructDump { ckpt, data, count } => {
            let ck = Checkpoint::load(ckpt)?;
            let vp = VisualPretrainer::from_checkpoint(&ck, &device)?;
            let set = load_prepared(data, &cfg)?;
            let n = (*count).min(set.len());
            let indices: Vec<usize> = (0..n).collect();
            let images = set.images(&indices, &device)?;
            let tiles = vp.reconstruction_triptych(&images, cfg.visual.mask_ratio, seed)?;
            let dir = out.join("reconstructions");
            fs::create_dir_all(&dir)?;
            for (i, t) in tiles.iter().enumerate() {
                t.save_png(&dir.join(format!("{i:03}.png")))?;
            }
            log::info!("{} triptychs -> {}", tiles.len(), dir.display());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}
