use super::vocab::Vocab;
use crate::error::{Error, Result};

/// Character ids padded with EOS to a fixed number of decoder positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSeq {
    pub ids: Vec<u32>,
    pub true_length: usize,
}

impl LabelSeq {
    pub fn capacity(&self) -> usize {
        self.ids.len()
    }

    pub fn chars(&self) -> &[u32] {
        &self.ids[..self.true_length]
    }
}

pub fn encode_label(text: &[char], vocab: &Vocab, n: usize) -> Result<LabelSeq> {
    if text.len() > n {
        return Err(Error::LabelLength {
            len: text.len(),
            capacity: n,
        });
    }
    let mut ids = text
        .iter()
        .map(|&c| vocab.id(c))
        .collect::<Result<Vec<_>>>()?;
    ids.resize(n, vocab.eos_id());
    Ok(LabelSeq {
        ids,
        true_length: text.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(vec!['a', 'b']).unwrap()
    }

    #[test]
    fn pads_with_eos() {
        let l = encode_label(&['a', 'b'], &vocab(), 4).unwrap();
        assert_eq!(l.ids, vec![0, 1, 2, 2]);
        assert_eq!(l.true_length, 2);
    }

    #[test]
    fn empty_text() {
        let l = encode_label(&[], &vocab(), 3).unwrap();
        assert_eq!(l.ids, vec![2, 2, 2]);
        assert_eq!(l.true_length, 0);
    }

    #[test]
    fn full_length_has_no_eos() {
        let l = encode_label(&['b', 'a', 'b'], &vocab(), 3).unwrap();
        assert_eq!(l.ids, vec![1, 0, 1]);
        assert_eq!(l.true_length, 3);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            encode_label(&['a', 'c'], &vocab(), 4),
            Err(Error::OutOfVocab('c'))
        ));
        assert!(matches!(
            encode_label(&['a'; 5], &vocab(), 4),
            Err(Error::LabelLength { len: 5, capacity: 4 })
        ));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(text in "[a-p]{0,12}") {
            let v = Vocab::new(('a'..='p').collect()).unwrap();
            let chars: Vec<char> = text.chars().collect();
            let l = encode_label(&chars, &v, 12).unwrap();
            prop_assert_eq!(v.decode(&l.ids), text);
        }
    }
}
