use candle_core::Tensor;

use super::{token_nll, Loss};
use crate::data::LabelSeq;
use crate::error::{Error, Result};

/// Cross-entropy over the masked character positions only, where decoder row
/// `n` predicts character `n`. Normalized per sample by the number of masked
/// characters, then averaged over the batch.
pub fn masked_char_loss(logits: &Tensor, labels: &[LabelSeq], masked: &[Vec<usize>]) -> Result<Loss> {
    let (b, n, _) = logits.dims3()?;
    if labels.len() != b || masked.len() != b {
        return Err(Error::Shape(format!(
            "batch of {b} with {} labels and {} mask sets",
            labels.len(),
            masked.len()
        )));
    }
    let mut ids = Vec::with_capacity(b * n);
    let mut weights = vec![0.0f64; b * n];
    let mut counted = 0;
    for (i, (label, positions)) in labels.iter().zip(masked).enumerate() {
        if label.capacity() != n {
            return Err(Error::Shape(format!(
                "label has {} positions, logits have {n}",
                label.capacity()
            )));
        }
        if positions.is_empty() {
            return Err(Error::EmptyMask("no masked characters"));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= label.true_length) {
            return Err(Error::Shape(format!(
                "masked position {p} outside text of length {}",
                label.true_length
            )));
        }
        counted += positions.len();
        ids.extend_from_slice(&label.ids);
        for &p in positions {
            weights[i * n + p] = 1.0 / (positions.len() as f64 * b as f64);
        }
    }
    let nll = token_nll(logits, ids)?;
    let w = Tensor::from_vec(weights, (b, n), logits.device())?.to_dtype(logits.dtype())?;
    let total = (nll * w)?.sum_all()?;
    Loss::single(total, "masked_char", counted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_label, Vocab};
    use candle_core::{DType, Device, Var};

    fn label(text: &str) -> LabelSeq {
        let v = Vocab::new(vec!['a', 'b', 'c']).unwrap();
        encode_label(&text.chars().collect::<Vec<_>>(), &v, 6).unwrap()
    }

    #[test]
    fn one_correct_masked_position_gives_zero() {
        let mut data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        // Position 1 of "cab" is 'a' (id 0).
        for k in 0..4 {
            data[4 + k] = if k == 0 { 1e3 } else { -1e3 };
        }
        let logits = Tensor::from_vec(data, (1, 6, 4), &Device::Cpu).unwrap();
        let l = masked_char_loss(&logits, &[label("cab")], &[vec![1]]).unwrap();
        assert!(l.report.total.abs() < 1e-12);
    }

    #[test]
    fn all_masked_uniform_gives_log_v() {
        let logits = Tensor::zeros((1, 6, 4), DType::F64, &Device::Cpu).unwrap();
        let l = masked_char_loss(&logits, &[label("abcab")], &[vec![0, 1, 2, 3, 4]]).unwrap();
        assert!((l.report.total - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unmasked_rows_get_no_gradient() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 6, 4), &Device::Cpu).unwrap()).unwrap();
        let l = masked_char_loss(x.as_tensor(), &[label("abca")], &[vec![2]]).unwrap();
        let g = l.value.backward().unwrap().get(&x).unwrap().to_vec3::<f64>().unwrap();
        for (pos, row) in g[0].iter().enumerate() {
            assert_eq!(row.iter().any(|v| *v != 0.0), pos == 2, "row {pos}");
        }
    }

    #[test]
    fn invalid_masks() {
        let logits = Tensor::zeros((1, 6, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            masked_char_loss(&logits, &[label("ab")], &[vec![]]),
            Err(Error::EmptyMask(_))
        ));
        assert!(masked_char_loss(&logits, &[label("ab")], &[vec![2]]).is_err());
    }
}
