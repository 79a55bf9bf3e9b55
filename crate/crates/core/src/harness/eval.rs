//! Greedy decoding and sentence-level accuracy.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::{PreparedSet, Vocab};
use crate::error::{Error, Result};
use crate::model::{argmax_ids, ctc_collapse, Ctx, Head, MaskOcr};

/// String normalization applied to both prediction and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub lowercase: bool,
    pub strip_spaces: bool,
    /// Per-character replacements applied before the other rules
    /// (e.g. full-width to half-width forms).
    #[serde(default)]
    pub substitutions: BTreeMap<char, String>,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_spaces: true,
            substitutions: BTreeMap::new(),
        }
    }
}

impl Normalization {
    pub fn apply(&self, s: &str) -> String {
        let mut out = String::with_capacity(s.len());
        for c in s.chars() {
            match self.substitutions.get(&c) {
                Some(rep) => out.push_str(rep),
                None => out.push(c),
            }
        }
        if self.lowercase {
            out = out.to_lowercase();
        }
        if self.strip_spaces {
            out.retain(|c| !c.is_whitespace());
        }
        out
    }

    /// Reads a substitution table: one `from<TAB>to` pair per line, `#` comments.
    pub fn load_substitutions(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (from, to) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: expected from<TAB>to", n + 1)))?;
            let mut chars = from.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => {
                    self.substitutions.insert(c, to.to_string());
                }
                _ => return Err(Error::format(path, format!("line {}: source must be one character", n + 1))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
}

/// Greedy transcription of every example, batched.
pub fn predict(model: &MaskOcr, data: &PreparedSet, vocab: &Vocab, batch_size: usize, device: &Device) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for batch in indices.chunks(batch_size.max(1)) {
        let images = data.images(batch, device)?;
        let logits = model.forward_recognize(&images, &mut Ctx::eval())?;
        for row in argmax_ids(&logits)? {
            out.push(match model.head {
                Head::Query(_) => vocab.decode(&row),
                Head::Ctc(_) => vocab.decode(&ctc_collapse(&row, vocab.blank_id())),
            });
        }
    }
    Ok(out)
}

/// Fraction of exact matches after normalization.
pub fn score(predictions: &[String], truths: &[String], norm: &Normalization) -> Result<EvalReport> {
    if truths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} references",
            predictions.len(),
            truths.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| norm.apply(p) == norm.apply(t))
        .count();
    Ok(EvalReport {
        accuracy: correct as f64 / truths.len() as f64,
        correct,
        count: truths.len(),
    })
}

pub fn evaluate(
    model: &MaskOcr,
    data: &PreparedSet,
    vocab: &Vocab,
    norm: &Normalization,
    batch_size: usize,
    device: &Device,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predictions = predict(model, data, vocab, batch_size, device)?;
    let truths: Vec<String> = data.examples.iter().map(|e| e.text.iter().collect()).collect();
    score(&predictions, &truths, norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        let n = Normalization::default();
        assert_eq!(n.apply("AbC "), "abc");
        assert_eq!(n.apply("a b\tc"), "abc");
        let mut n = Normalization::default();
        n.substitutions.insert('Ａ', "a".into());
        assert_eq!(n.apply("ＡB"), "ab");
    }

    #[test]
    fn scoring() {
        let r = score(&["AbC ".into(), "x".into()], &["abc".into(), "y".into()], &Normalization::default()).unwrap();
        assert_eq!((r.correct, r.count), (1, 2));
        assert_eq!(r.accuracy, 0.5);
        // Immediate EOS decodes to "", which matches an empty reference.
        let r = score(&["".into()], &["".into()], &Normalization::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(matches!(score(&[], &[], &Normalization::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn substitution_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("subst.tsv");
        std::fs::write(&p, "# full width\nＡ\ta\n").unwrap();
        let mut n = Normalization::default();
        n.load_substitutions(&p).unwrap();
        assert_eq!(n.apply("Ａ"), "a");
        std::fs::write(&p, "AB\tc\n").unwrap();
        assert!(n.load_substitutions(&p).is_err());
    }
}
