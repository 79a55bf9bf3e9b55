//! Shared optimization loop: AdamW, linear warm-up plus cosine decay, logging.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Loss, LossReport};
use crate::model::Ctx;

/// Linear learning-rate scaling: `base_lr * batch_size / 256`.
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warm-up from zero to `peak`, then cosine decay to `floor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            lr: 1e-4,
            min_lr: 0.0,
            warmup_epochs: 0.5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    #[serde(flatten)]
    pub components: std::collections::BTreeMap<String, f64>,
}

impl LogRecord {
    fn new(stage: &str, epoch: usize, step: usize, lr: f64, report: &LossReport) -> Self {
        Self {
            stage: stage.to_string(),
            epoch,
            step,
            lr,
            loss_total: report.total,
            components: report
                .components
                .iter()
                .map(|(k, v)| (format!("loss_{k}"), *v))
                .collect(),
        }
    }
}

/// Collects log records and optionally appends them to a JSON-lines file.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some((path.to_path_buf(), BufWriter::new(file))),
        })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&record).map_err(|e| Error::format(&*path, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }

    /// Mean `loss_total` over the records of `epoch`.
    pub fn epoch_mean(&self, stage: &str, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.stage == stage && r.epoch == epoch)
            .map(|r| r.loss_total)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Sample order for one epoch; a pure function of `(n, seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 32) ^ 0xe90c);
    order.shuffle(&mut rng);
    order
}

/// Called after each epoch; returning an error aborts training.
pub type EpochHook<'a> = dyn FnMut(usize) -> Result<()> + 'a;

/// Runs `epochs` passes over `n` samples in shuffled mini-batches.
///
/// `step_fn` receives the batch indices, the epoch, the global step and a
/// training-mode [`Ctx`], and returns the loss to minimize over `vars`.
#[allow(clippy::too_many_arguments)]
pub fn fit<F>(
    stage: &str,
    n: usize,
    optim: &OptimConfig,
    vars: Vec<Var>,
    seed: u64,
    log: &mut TrainLog,
    mut step_fn: F,
    mut on_epoch_end: Option<&mut EpochHook<'_>>,
) -> Result<()>
where
    F: FnMut(&[usize], usize, usize, &mut Ctx) -> Result<Loss>,
{
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let bs = optim.batch_size.max(1);
    let steps_per_epoch = n.div_ceil(bs);
    let schedule = Schedule {
        peak: optim.lr,
        floor: optim.min_lr,
        warmup_steps: (optim.warmup_epochs * steps_per_epoch as f64).round() as usize,
        total_steps: optim.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: schedule.lr(0),
            beta1: optim.beta1,
            beta2: optim.beta2,
            eps: 1e-8,
            weight_decay: optim.weight_decay,
        },
    )?;
    let mut step = 0;
    for epoch in 0..optim.epochs {
        let order = epoch_permutation(n, seed, epoch);
        for batch in order.chunks(bs) {
            let lr = schedule.lr(step);
            opt.set_learning_rate(lr);
            let mut ctx = Ctx::train(seed ^ 0xd50f ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let loss = step_fn(batch, epoch, step, &mut ctx)?;
            if !loss.report.total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("{stage}: {:?}", loss.report.components),
                });
            }
            opt.backward_step(&loss.value)?;
            log.push(LogRecord::new(stage, epoch, step, lr, &loss.report))?;
            step += 1;
        }
        log.flush()?;
        if let Some(hook) = on_epoch_end.as_deref_mut() {
            hook(epoch)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_scaling_rule() {
        assert!((scaled_lr(1.5e-4, 4096) - 2.4e-3).abs() < 1e-15);
    }

    #[test]
    fn warmup_then_cosine() {
        let s = Schedule {
            peak: 1.0,
            floor: 0.0,
            warmup_steps: 4,
            total_steps: 14,
        };
        assert!((s.lr(0) - 0.25).abs() < 1e-12);
        assert!((s.lr(3) - 1.0).abs() < 1e-12);
        assert!((s.lr(4) - 1.0).abs() < 1e-12);
        assert!((s.lr(9) - 0.5).abs() < 1e-12);
        assert!(s.lr(14).abs() < 1e-12);
        for k in 4..14 {
            assert!(s.lr(k + 1) <= s.lr(k));
        }
    }

    #[test]
    fn epoch_permutation_is_reproducible() {
        let a = epoch_permutation(5, 4, 1);
        assert_eq!(a, epoch_permutation(5, 4, 1));
        assert_ne!(a, epoch_permutation(5, 4, 2));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fit_minimizes_a_quadratic() {
        use candle_core::{Device, Tensor};
        let dev = Device::Cpu;
        let w = Var::from_tensor(&Tensor::new(&[3.0f32, -2.0], &dev).unwrap()).unwrap();
        let optim = OptimConfig {
            epochs: 200,
            batch_size: 1,
            lr: 0.05,
            warmup_epochs: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut log = TrainLog::in_memory();
        fit("quad", 1, &optim, vec![w.clone()], 0, &mut log, |_, _, _, _| {
            let v = w.as_tensor().sqr()?.sum_all()?;
            let total = v.to_scalar::<f32>()? as f64;
            Ok(Loss {
                value: v,
                report: LossReport {
                    total,
                    components: Default::default(),
                    counted_positions: 1,
                },
            })
        }, None)
        .unwrap();
        assert_eq!(log.records.len(), 200);
        assert!(log.records.last().unwrap().loss_total < 1e-2);
        assert!(fit("x", 0, &optim, vec![], 0, &mut log, |_, _, _, _| unreachable!(), None).is_err());
    }
}
