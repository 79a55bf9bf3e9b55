//! Finetuning, evaluation, linear probing, experiment pipelines and ablation
//! suites, plus the run configuration they share.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod finetune;
pub mod plot;

pub use ablation::{Runner, Suite, SuiteReport};
pub use config::{AppConfig, DataKind};
pub use eval::{evaluate, EvalReport, Normalization};
pub use experiment::{Datasets, ExperimentSpec, Pipeline, StageKind};
pub use finetune::{finetune, linear_probe, FinetuneConfig, ProbeConfig};
