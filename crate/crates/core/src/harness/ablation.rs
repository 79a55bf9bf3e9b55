//! Ablation suites: grids of experiments over seeds, aggregated into reports.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::config::AppConfig;
use super::experiment::{run_experiment, Datasets, ExperimentSpec, Overrides, RunResult, StageCache, StageKind};
use super::plot::{save_bar_chart, Bar};
use crate::error::{Error, Result};
use crate::model::DecoderKind;
use crate::train::TrainLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    VlTable,
    FreezeTable,
    MaskRatioSweep,
    LangMaskTable,
    PatchSize,
    CtcGeneralizability,
    LinearProbe,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::VlTable,
        Suite::FreezeTable,
        Suite::MaskRatioSweep,
        Suite::LangMaskTable,
        Suite::PatchSize,
        Suite::CtcGeneralizability,
        Suite::LinearProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::VlTable => "vl_table",
            Suite::FreezeTable => "freeze_table",
            Suite::MaskRatioSweep => "mask_ratio_sweep",
            Suite::LangMaskTable => "lang_mask_table",
            Suite::PatchSize => "patch_size",
            Suite::CtcGeneralizability => "ctc_generalizability",
            Suite::LinearProbe => "linear_probe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

/// One row of a suite: an experiment plus the published large-scale number it mirrors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub spec: ExperimentSpec,
    /// Large-scale reference accuracy in percent; an annotation, never a threshold.
    pub reference: Option<f64>,
}

fn row(name: &str, stages: &[StageKind], reference: Option<f64>, overrides: Overrides) -> Row {
    let mut spec = ExperimentSpec::new(name, stages);
    spec.overrides = overrides;
    // The "L only" rows pretrain the decoder on a randomly initialized, frozen encoder.
    spec.allow_language_without_visual = !stages.contains(&StageKind::PretrainVisual);
    Row { spec, reference }
}

/// Experiment grid of a suite.
pub fn suite_rows(suite: Suite, cfg: &AppConfig) -> Vec<Row> {
    use StageKind::*;
    let none = Overrides::default;
    match suite {
        Suite::VlTable => vec![
            row("Scratch", &[Finetune], Some(75.8), none()),
            row("V", &[PretrainVisual, Finetune], Some(79.8), none()),
            row("L", &[PretrainLanguage, Finetune], Some(77.7), none()),
            row("V+L", &[PretrainVisual, PretrainLanguage, Finetune], Some(80.8), none()),
        ],
        Suite::FreezeTable => vec![
            row("Scratch", &[Finetune], Some(75.8), none()),
            row(
                "Retrain encoder",
                &[PretrainVisual, PretrainLanguage, Finetune],
                Some(76.7),
                Overrides {
                    freeze_encoder: Some(false),
                    ..none()
                },
            ),
            row("Fix encoder", &[PretrainVisual, PretrainLanguage, Finetune], Some(80.8), none()),
        ],
        Suite::MaskRatioSweep => cfg
            .ablation
            .mask_ratios
            .iter()
            .map(|&r| {
                row(
                    &format!("ratio {r:.2}"),
                    &[PretrainVisual, Finetune],
                    None,
                    Overrides {
                        visual_mask_ratio: Some(r),
                        ..none()
                    },
                )
            })
            .collect(),
        Suite::LangMaskTable => {
            let no_mask = || Overrides {
                language_masking: Some(false),
                ..none()
            };
            vec![
                row("L", &[PretrainLanguage, Finetune], None, no_mask()),
                row("L+M", &[PretrainLanguage, Finetune], None, none()),
                row("V+L", &[PretrainVisual, PretrainLanguage, Finetune], None, no_mask()),
                row("V+L+M", &[PretrainVisual, PretrainLanguage, Finetune], None, none()),
            ]
        }
        Suite::PatchSize => cfg
            .ablation
            .patch_widths
            .iter()
            .map(|&w| {
                row(
                    &format!("width {w}"),
                    &[PretrainVisual, PretrainLanguage, Finetune],
                    None,
                    Overrides {
                        patch_width: Some(w),
                        ..none()
                    },
                )
            })
            .collect(),
        Suite::CtcGeneralizability => {
            let ctc = || Overrides {
                decoder: Some(DecoderKind::Ctc),
                ..none()
            };
            vec![
                row("CTC V", &[PretrainVisual, Finetune], Some(76.7), ctc()),
                row("CTC V+L", &[PretrainVisual, PretrainLanguage, Finetune], Some(80.1), ctc()),
            ]
        }
        Suite::LinearProbe => vec![
            row("Random", &[LinearProbe], None, none()),
            row("V+L", &[PretrainVisual, PretrainLanguage, LinearProbe], Some(47.8), none()),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub name: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across seeds (zero for a single seed).
    pub std: f64,
    pub reference: Option<f64>,
    pub spec: ExperimentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowSummary>,
    pub config: AppConfig,
    /// With a single test set the "average over sets" column equals the test accuracy.
    pub note: String,
}

impl SuiteReport {
    pub fn row(&self, name: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Fixed-width text table.
    pub fn summary_table(&self) -> String {
        let mut s = format!("suite {} (config {})\n", self.suite.name(), &self.config_hash[..12]);
        s.push_str(&format!(
            "{:<18} {:>8} {:>8} {:>10}  per-seed\n",
            "row", "mean%", "std%", "reference"
        ));
        for r in &self.rows {
            let reference = r.reference.map_or("-".to_string(), |v| format!("{v:.1}"));
            let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
            s.push_str(&format!(
                "{:<18} {:>8.2} {:>8.2} {:>10}  {}\n",
                r.name,
                100.0 * r.mean,
                100.0 * r.std,
                reference,
                seeds.join(" ")
            ));
        }
        s.push_str(&format!("note: {}\n", self.note));
        s
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Shared state across suites of one invocation: datasets per seed, cached
/// pretraining stages and finished runs (rows of different suites that name
/// the same chain, such as "V+L" and "Fix encoder", are trained once).
pub struct Runner {
    pub device: Device,
    pub out_dir: Option<PathBuf>,
    datasets: BTreeMap<(String, u64), Datasets>,
    cache: StageCache,
    results: BTreeMap<String, RunResult>,
}

impl Runner {
    pub fn new(device: Device, out_dir: Option<PathBuf>) -> Self {
        Self {
            device,
            out_dir,
            datasets: BTreeMap::new(),
            cache: StageCache::default(),
            results: BTreeMap::new(),
        }
    }

    fn datasets(&mut self, cfg: &AppConfig, seed: u64) -> Result<&Datasets> {
        // Data depends on the data section and on the model's input geometry.
        let key_src = serde_json::to_string(&(&cfg.data, &cfg.model)).map_err(|e| Error::Config(e.to_string()))?;
        let key = (key_src, seed);
        if !self.datasets.contains_key(&key) {
            let built = Datasets::build(cfg, seed)?;
            self.datasets.insert(key.clone(), built);
        }
        Ok(&self.datasets[&key])
    }

    /// Runs one suite. Each finished run is appended to `<out>/<suite>/runs.jsonl`
    /// immediately, so a failure leaves the completed results on disk.
    pub fn run_suite(&mut self, suite: Suite, cfg: &AppConfig, seeds: &[u64]) -> Result<SuiteReport> {
        let dir = self.out_dir.as_ref().map(|d| d.join(suite.name()));
        let mut runs_file = match &dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join("runs.jsonl");
                Some((File::create(&p).map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };
        let mut log = match &dir {
            Some(d) => TrainLog::to_file(&d.join("train_log.jsonl"))?,
            None => TrainLog::in_memory(),
        };
        let rows = suite_rows(suite, cfg);
        let mut summaries = Vec::new();
        for r in &rows {
            let mut spec = r.spec.clone();
            spec.seeds = seeds.to_vec();
            let run_cfg = spec.overrides.apply(cfg)?;
            let mut per_seed = Vec::new();
            for &seed in seeds {
                let device = self.device.clone();
                let key = format!(
                    "{}/{seed}/{:?}/{:?}/{}",
                    run_cfg.content_hash()?,
                    spec.init,
                    spec.stages,
                    spec.allow_language_without_visual
                );
                let result = match self.results.get(&key) {
                    Some(done) => RunResult {
                        experiment: spec.name.clone(),
                        ..done.clone()
                    },
                    None => {
                        let data = self.datasets(&run_cfg, seed)?.clone();
                        let result = run_experiment(&spec, cfg, seed, &data, &device, &mut self.cache, &mut log)?;
                        self.results.insert(key, result.clone());
                        result
                    }
                };
                if let Some((f, p)) = runs_file.as_mut() {
                    let line = serde_json::to_string(&result).map_err(|e| Error::format(p.as_path(), e))?;
                    writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
                }
                per_seed.push(result.accuracy);
            }
            let (mean, std) = mean_std(&per_seed);
            summaries.push(RowSummary {
                name: spec.name.clone(),
                per_seed,
                mean,
                std,
                reference: r.reference,
                spec,
            });
        }
        let report = SuiteReport {
            suite,
            config_hash: cfg.content_hash()?,
            seeds: seeds.to_vec(),
            rows: summaries,
            config: cfg.clone(),
            note: "single test set: the average column equals the test accuracy".into(),
        };
        if let Some(d) = &dir {
            write_report(d, &report)?;
        }
        Ok(report)
    }
}

fn write_report(dir: &Path, report: &SuiteReport) -> Result<()> {
    let p = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::format(&p, e))?;
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("summary.txt");
    fs::write(&p, report.summary_table()).map_err(|e| Error::io(&p, e))?;
    let bars: Vec<Bar> = report
        .rows
        .iter()
        .map(|r| Bar {
            label: r.name.clone(),
            value: r.mean,
            spread: r.std,
            note: r.reference.map(|v| format!("REF {v:.1}")),
        })
        .collect();
    save_bar_chart(&dir.join("plot.png"), report.suite.name(), &bars)?;
    // Append a one-line record to a cross-suite index.
    if let Some(parent) = dir.parent() {
        let p = parent.join("suites.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        let means: BTreeMap<&str, f64> = report.rows.iter().map(|r| (r.name.as_str(), r.mean)).collect();
        let line = serde_json::json!({
            "suite": report.suite,
            "config_hash": report.config_hash,
            "seeds": report.seeds,
            "means": means,
        });
        writeln!(f, "{line}").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn every_suite_row_is_a_valid_chain() {
        let cfg = AppConfig::default_config();
        for suite in Suite::ALL {
            assert_eq!(Suite::parse(suite.name()).unwrap(), suite);
            for r in suite_rows(suite, &cfg) {
                r.spec.validate(None).unwrap();
                r.spec.overrides.apply(&cfg).unwrap();
            }
        }
    }
}
