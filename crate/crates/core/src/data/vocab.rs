//! Character inventories with reserved end-of-sequence and CTC blank ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const HEADER_TAG: &str = "#vocab";

/// Characters take ids `0..n`; EOS is `n` and the CTC blank is `n + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    ids: HashMap<char, u32>,
}

impl Vocab {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if ids.insert(c, i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(Self { chars, ids })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn eos_id(&self) -> u32 {
        self.chars.len() as u32
    }

    pub fn blank_id(&self) -> u32 {
        self.chars.len() as u32 + 1
    }

    /// Output classes of the query decoder: characters plus EOS.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    /// Output classes of the CTC head: [`Vocab::size`] plus the blank.
    pub fn ctc_size(&self) -> usize {
        self.size() + 1
    }

    pub fn id(&self, c: char) -> Result<u32> {
        self.ids.get(&c).copied().ok_or(Error::OutOfVocab(c))
    }

    pub fn char(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    /// Maps ids to text, stopping at the first EOS and skipping blanks.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != self.eos_id())
            .filter_map(|&i| self.char(i))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER_TAG} count={} eos={} blank={}\n",
            self.chars.len(),
            self.eos_id(),
            self.blank_id()
        );
        for &c in &self.chars {
            match c {
                ' ' => out.push_str("\\s"),
                '\\' => out.push_str("\\\\"),
                c => out.push(c),
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("missing header line")?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(format!("header must start with {HEADER_TAG}"));
        }
        let mut count = None;
        for f in fields {
            if let Some(v) = f.strip_prefix("count=") {
                count = Some(v.parse::<usize>().map_err(|e| e.to_string())?);
            }
        }
        let mut chars = Vec::new();
        for line in lines {
            let c = match line {
                "\\s" => ' ',
                "\\\\" => '\\',
                l => {
                    let mut it = l.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => return Err(format!("entry {line:?} is not a single character")),
                    }
                }
            };
            chars.push(c);
        }
        if let Some(n) = count {
            if n != chars.len() {
                return Err(format!("header declares {n} entries, found {}", chars.len()));
            }
        }
        let vocab = Vocab::new(chars).map_err(|e| e.to_string())?;
        // Reserved ids are positional; reject files whose header disagrees.
        for f in header.split_whitespace() {
            if let Some(v) = f.strip_prefix("eos=") {
                if v.parse::<u32>().ok() != Some(vocab.eos_id()) {
                    return Err(format!("eos id {v} does not follow the characters"));
                }
            }
            if let Some(v) = f.strip_prefix("blank=") {
                if v.parse::<u32>().ok() != Some(vocab.blank_id()) {
                    return Err(format!("blank id {v} does not follow eos"));
                }
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::format(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct() {
        let v = Vocab::new(vec!['a', 'b']).unwrap();
        assert_eq!(v.eos_id(), 2);
        assert_eq!(v.blank_id(), 3);
        assert_eq!(v.size(), 3);
        assert_eq!(v.ctc_size(), 4);
        assert!(Vocab::new(vec!['a', 'a']).is_err());
    }

    #[test]
    fn text_round_trip_with_escapes() {
        let v = Vocab::new(vec!['a', ' ', '\\', 'z']).unwrap();
        let back = Vocab::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn header_is_checked() {
        assert!(Vocab::parse("a\nb\n").is_err());
        assert!(Vocab::parse("#vocab count=3 eos=2 blank=3\na\nb\n").is_err());
        assert!(Vocab::parse("#vocab count=2 eos=5 blank=3\na\nb\n").is_err());
        assert!(Vocab::parse("#vocab count=2 eos=2 blank=3\na\nb\n").is_ok());
    }
}
