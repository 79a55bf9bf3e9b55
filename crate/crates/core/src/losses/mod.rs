//! Training objectives: sequence recognition, masked image modeling,
//! masked-character prediction, and CTC.

pub mod ctc;
mod masked_char;
mod mim;
mod recognition;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use ctc::{ctc_brute_force, ctc_loss, ctc_nll, ctc_nll_grad, ctc_required_frames};
pub use masked_char::masked_char_loss;
pub use mim::{mim_loss, patch_pixel_target, PATCH_NORM_EPS};
pub use recognition::recognition_loss;

use crate::error::Result;

/// Scalar summary of one loss evaluation, for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub counted_positions: usize,
}

/// A differentiable loss value together with its report.
#[derive(Debug, Clone)]
pub struct Loss {
    pub value: Tensor,
    pub report: LossReport,
}

impl Loss {
    fn single(value: Tensor, name: &str, counted_positions: usize) -> Result<Self> {
        let total = value.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        Ok(Self {
            value,
            report: LossReport {
                total,
                components: BTreeMap::from([(name.to_string(), total)]),
                counted_positions,
            },
        })
    }
}

/// Per-position negative log-likelihood of `ids` under `logits` (`B × N × V` → `B × N`).
fn token_nll(logits: &Tensor, ids: Vec<u32>) -> Result<Tensor> {
    let (b, n, _) = logits.dims3()?;
    let idx = Tensor::from_vec(ids, (b, n, 1), logits.device())?;
    let logp = crate::model::ops::log_softmax_last_dim(logits)?;
    Ok(logp.gather(&idx, 2)?.squeeze(2)?.neg()?)
}
