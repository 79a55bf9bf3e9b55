//! Toy text corpora: a first-order Markov chain over a small alphabet.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub alphabet: Vec<char>,
    /// Row `i` holds the unnormalized weights of the character following `alphabet[i]`.
    pub bigram_weights: Vec<Vec<f64>>,
    pub length_range: (usize, usize),
    pub size: usize,
}

impl CorpusSpec {
    /// Every transition equally likely.
    pub fn uniform(alphabet: Vec<char>, length_range: (usize, usize), size: usize) -> Self {
        let n = alphabet.len();
        Self {
            alphabet,
            bigram_weights: vec![vec![1.0; n]; n],
            length_range,
            size,
        }
    }

    /// A chain where each character's successor is drawn from a fixed random
    /// permutation with probability `peak`, and uniformly otherwise.
    /// `peak = 1.0` makes every character fully determined by its left neighbour.
    pub fn peaked(
        alphabet: Vec<char>,
        peak: f64,
        length_range: (usize, usize),
        size: usize,
        seed: u64,
    ) -> Self {
        let n = alphabet.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut successor: Vec<usize> = (0..n).collect();
        // Fisher-Yates, rejecting self loops so chains do not stall on one glyph.
        loop {
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                successor.swap(i, j);
            }
            if n < 2 || successor.iter().enumerate().all(|(i, &s)| i != s) {
                break;
            }
        }
        let rest = if n > 1 { (1.0 - peak) / (n - 1) as f64 } else { 0.0 };
        let bigram_weights = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if j == successor[i] { peak.max(rest) } else { rest })
                    .collect()
            })
            .collect();
        Self {
            alphabet,
            bigram_weights,
            length_range,
            size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.alphabet.len();
        if n == 0 {
            return Err(Error::Config("empty alphabet".into()));
        }
        let (lo, hi) = self.length_range;
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!("invalid length range [{lo}, {hi}]")));
        }
        if self.bigram_weights.len() != n {
            return Err(Error::Config(format!(
                "bigram matrix has {} rows for {n} characters",
                self.bigram_weights.len()
            )));
        }
        for (i, row) in self.bigram_weights.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Config(format!("bigram row {i} has {} entries", row.len())));
            }
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) || row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!(
                    "bigram row {i} must be nonnegative with a positive sum"
                )));
            }
        }
        Ok(())
    }
}

/// Draws one string: uniform length, uniform first character, then the bigram chain.
pub fn sample_text(spec: &CorpusSpec, seed: u64) -> Result<Vec<char>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.length_range;
    let len = rng.gen_range(lo..=hi);
    let rows = spec
        .bigram_weights
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut cur = rng.gen_range(0..spec.alphabet.len());
    let mut out = Vec::with_capacity(len);
    out.push(spec.alphabet[cur]);
    for _ in 1..len {
        cur = rows[cur].sample(&mut rng);
        out.push(spec.alphabet[cur]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_symbol_alphabet() {
        let spec = CorpusSpec::uniform(vec!['a'], (3, 3), 1);
        for seed in 0..5 {
            assert_eq!(sample_text(&spec, seed).unwrap(), vec!['a'; 3]);
        }
    }

    #[test]
    fn forced_alternation() {
        let spec = CorpusSpec {
            alphabet: vec!['a', 'b'],
            bigram_weights: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            length_range: (4, 4),
            size: 1,
        };
        let mut saw_a_first = false;
        for seed in 0..16 {
            let s: String = sample_text(&spec, seed).unwrap().into_iter().collect();
            assert!(s == "abab" || s == "baba", "{s}");
            saw_a_first |= s == "abab";
        }
        assert!(saw_a_first);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = CorpusSpec::peaked(('a'..='p').collect(), 0.8, (3, 8), 10, 1);
        let a = sample_text(&spec, 7).unwrap();
        let b = sample_text(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert!((3..=8).contains(&a.len()));
    }

    #[test]
    fn fully_peaked_chain_is_deterministic_after_first_char() {
        let spec = CorpusSpec::peaked(('a'..='p').collect(), 1.0, (8, 8), 10, 3);
        let alpha = &spec.alphabet;
        for seed in 0..10 {
            let s = sample_text(&spec, seed).unwrap();
            for w in s.windows(2) {
                let i = alpha.iter().position(|c| *c == w[0]).unwrap();
                let j = alpha.iter().position(|c| *c == w[1]).unwrap();
                assert_eq!(spec.bigram_weights[i][j], 1.0);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(sample_text(&CorpusSpec::uniform(vec![], (1, 2), 1), 0).is_err());
        assert!(sample_text(&CorpusSpec::uniform(vec!['a'], (0, 2), 1), 0).is_err());
        assert!(sample_text(&CorpusSpec::uniform(vec!['a'], (3, 2), 1), 0).is_err());
        let mut spec = CorpusSpec::uniform(vec!['a', 'b'], (1, 2), 1);
        spec.bigram_weights[1] = vec![0.0, 0.0];
        assert!(sample_text(&spec, 0).is_err());
    }
}
