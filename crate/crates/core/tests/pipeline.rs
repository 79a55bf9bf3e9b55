//! End-to-end behaviour of the training stages and the command-line tool on
//! deliberately small configurations.

use std::path::Path;
use std::process::Command;

use candle_core::Device;
use maskocr::harness::{AppConfig, DataKind, Pipeline};
use maskocr::model::{Checkpoint, DecoderKind, Stage, ENCODER_PREFIX};
use maskocr::train::TrainLog;

fn small_config() -> AppConfig {
    let mut cfg = AppConfig::default_config();
    cfg.model.enc_dim = 32;
    cfg.model.dec_dim = 32;
    cfg.model.enc_layers = 2;
    cfg.model.dec_layers = 1;
    cfg.model.regressor_layers = 1;
    cfg.model.pixel_decoder_layers = 1;
    cfg.model.drop_path_rate = 0.0;
    cfg.data.sizes.synthetic = 64;
    cfg.data.sizes.unlabeled = 64;
    cfg.data.sizes.labeled = 32;
    cfg.data.sizes.val = 16;
    cfg.data.sizes.test = 16;
    cfg.visual.optim.epochs = 1;
    cfg.visual.optim.batch_size = 16;
    cfg.language.optim.epochs = 1;
    cfg.finetune.optim.epochs = 1;
    cfg.probe.optim.epochs = 1;
    cfg
}

#[test]
fn finetuning_memorizes_a_small_training_set() {
    let mut cfg = small_config();
    cfg.finetune.optim.epochs = 120;
    cfg.finetune.optim.batch_size = 16;
    cfg.finetune.lr_scratch = 2e-3;
    let samples = cfg.data.samples(DataKind::Synthetic, 16, &cfg.model, 0).unwrap();
    let set = cfg.data.prepare(&samples, &cfg.model).unwrap();
    let mut p = Pipeline::scratch(&cfg, 0, &Device::Cpu).unwrap();
    let mut log = TrainLog::in_memory();
    p.finetune(&set, None, &mut log).unwrap();
    let first = log.epoch_mean("finetune", 0).unwrap();
    let last = log.epoch_mean("finetune", 119).unwrap();
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    let acc = p.evaluate(&set).unwrap().accuracy;
    assert!(acc >= 0.9, "training accuracy {acc}");
}

#[test]
fn ctc_language_pretraining_reduces_its_loss() {
    let mut cfg = small_config();
    cfg.model.decoder = DecoderKind::Ctc;
    cfg.language.optim.epochs = 6;
    cfg.language.optim.lr = 3e-3;
    let data = cfg.data.build(DataKind::Synthetic, &cfg.model, 0).unwrap();
    let mut p = Pipeline::scratch(&cfg, 0, &Device::Cpu).unwrap();
    let encoder = p.store.hash(&[ENCODER_PREFIX]).unwrap();
    let mut log = TrainLog::in_memory();
    p.pretrain_language(&data, &mut log).unwrap();
    let first = log.epoch_mean("language_pretrain_ctc", 0).unwrap();
    let last = log.epoch_mean("language_pretrain_ctc", 5).unwrap();
    assert!(last < first, "ctc loss {first} -> {last}");
    assert_eq!(p.store.hash(&[ENCODER_PREFIX]).unwrap(), encoder);
}

#[test]
fn evaluation_is_a_pure_function_of_checkpoint_and_data() {
    let cfg = small_config();
    let dev = Device::Cpu;
    let data = cfg.data.build(DataKind::Test, &cfg.model, 1).unwrap();
    let p = Pipeline::scratch(&cfg, 1, &dev).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    p.checkpoint().unwrap().save(&path).unwrap();
    let q = Pipeline::from_checkpoint(&cfg, &Checkpoint::load(&path).unwrap(), 9, &dev).unwrap();
    assert_eq!(p.evaluate(&data).unwrap(), q.evaluate(&data).unwrap());
    assert_eq!(p.store.hash(&[""]).unwrap(), q.store.hash(&[""]).unwrap());
}

fn maskocr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_maskocr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, small_config().to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn show_config_round_trips_through_the_config_parser() {
    let out = maskocr(&["show-config"]);
    assert!(out.status.success());
    let shown = AppConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(shown, AppConfig::default_config());
}

#[test]
fn decoder_pretraining_requires_a_visual_checkpoint_unless_allowed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let d = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    assert!(maskocr(&["--config", &cfg, "--out", &d("data"), "synthesize", "--kind", "synthetic", "--size", "8"])
        .status
        .success());
    let refused = maskocr(&["--config", &cfg, "--out", &d("dec"), "pretrain-decoder", "--data", &d("data/synthetic")]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--allow-scratch-encoder"));

    let allowed = maskocr(&[
        "--config", &cfg, "--out", &d("dec"), "pretrain-decoder", "--data", &d("data/synthetic"),
        "--allow-scratch-encoder",
    ]);
    assert!(allowed.status.success(), "{}", String::from_utf8_lossy(&allowed.stderr));
    let ck = Checkpoint::load(&tmp.path().join("dec/decoder.ckpt")).unwrap();
    assert_eq!(ck.stage, Stage::LanguagePretrain);

    // A language-pretrained checkpoint is not an encoder checkpoint.
    let wrong = maskocr(&[
        "--config", &cfg, "--out", &d("dec2"), "pretrain-decoder", "--data", &d("data/synthetic"),
        "--encoder", &d("dec/decoder.ckpt"),
    ]);
    assert!(!wrong.status.success());
}

#[test]
fn unknown_device_is_rejected() {
    let out = maskocr(&["--device", "tpu", "show-config"]);
    assert!(!out.status.success());
}
