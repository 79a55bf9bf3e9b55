use candle_core::Tensor;

use super::{token_nll, Loss};
use crate::data::LabelSeq;
use crate::error::{Error, Result};

/// Cross-entropy over each sample's characters and its first EOS only,
/// normalized per sample by `L + 1` and averaged over the batch.
/// Positions after the first EOS carry neither loss nor gradient.
pub fn recognition_loss(logits: &Tensor, labels: &[LabelSeq]) -> Result<Loss> {
    let (b, n, _) = logits.dims3()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    let mut ids = Vec::with_capacity(b * n);
    let mut weights = Vec::with_capacity(b * n);
    let mut counted = 0;
    for label in labels {
        if label.capacity() != n {
            return Err(Error::Shape(format!(
                "label has {} positions, logits have {n}",
                label.capacity()
            )));
        }
        if label.true_length >= n {
            return Err(Error::LabelLength {
                len: label.true_length,
                capacity: n - 1,
            });
        }
        let counted_here = label.true_length + 1;
        counted += counted_here;
        ids.extend_from_slice(&label.ids);
        weights.extend((0..n).map(|i| {
            if i < counted_here {
                1.0 / (counted_here as f64 * b as f64)
            } else {
                0.0
            }
        }));
    }
    let nll = token_nll(logits, ids)?;
    let w = Tensor::from_vec(weights, (b, n), logits.device())?.to_dtype(logits.dtype())?;
    let total = (nll * w)?.sum_all()?;
    Loss::single(total, "recognition", counted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_label, Vocab};
    use candle_core::{Device, Var};

    fn label(text: &str, n: usize) -> LabelSeq {
        let v = Vocab::new(vec!['a', 'b', 'c']).unwrap();
        encode_label(&text.chars().collect::<Vec<_>>(), &v, n).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Tensor::zeros((2, 5, 4), candle_core::DType::F64, &Device::Cpu).unwrap();
        for text in ["", "ab", "abca"] {
            let l = recognition_loss(&logits, &[label(text, 5), label("c", 5)]).unwrap();
            assert!((l.report.total - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_logits_give_zero_and_tail_is_ignored() {
        let lab = label("ab", 5);
        let mut data = vec![-1e3f64; 5 * 4];
        for (pos, &id) in lab.ids.iter().enumerate().take(3) {
            data[pos * 4 + id as usize] = 1e3;
        }
        // Garbage in rows after the first EOS.
        data[4 * 4] = 50.0;
        let logits = Tensor::from_vec(data, (1, 5, 4), &Device::Cpu).unwrap();
        let l = recognition_loss(&logits, &[lab]).unwrap();
        assert!(l.report.total.abs() < 1e-12);
        assert_eq!(l.report.counted_positions, 3);
    }

    #[test]
    fn gradient_vanishes_after_first_eos() {
        let lab = label("a", 5);
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 5, 4), &Device::Cpu).unwrap()).unwrap();
        let l = recognition_loss(x.as_tensor(), &[lab]).unwrap();
        let g = l.value.backward().unwrap();
        let g = g.get(&x).unwrap().to_vec3::<f64>().unwrap();
        for row in &g[0][2..] {
            assert!(row.iter().all(|v| *v == 0.0));
        }
        assert!(g[0][1].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn full_label_is_rejected() {
        let logits = Tensor::zeros((1, 3, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            recognition_loss(&logits, &[label("abc", 3)]),
            Err(Error::LabelLength { .. })
        ));
    }
}
