//! Procedural bitmap fonts.
//!
//! Every character gets a coarse binary skeleton derived from its code point.
//! A font style expands the skeleton into pixels, so the same character looks
//! related across fonts while widths and stroke weights differ.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const SKELETON_ROWS: usize = 5;
const ROW_SCALE: usize = 2;

/// Number of distinct procedural styles; `font_id` selects one.
pub const NUM_STYLES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn column_set(&self, x: usize) -> bool {
        (0..self.height).any(|y| self.get(y, x))
    }
}

#[derive(Debug, Clone)]
pub struct GlyphFont {
    pub font_id: u32,
    /// Shared glyph height in pixels.
    pub height: usize,
    /// Row of the glyph cell that sits on the text baseline.
    pub baseline: usize,
    glyphs: BTreeMap<char, Bitmap>,
}

impl GlyphFont {
    /// Builds style `font_id` for every character of `alphabet`.
    pub fn procedural(font_id: u32, alphabet: &[char]) -> Result<Self> {
        if font_id >= NUM_STYLES {
            return Err(Error::Config(format!(
                "font id {font_id} out of range (0..{NUM_STYLES})"
            )));
        }
        let skeletons = distinct_skeletons(alphabet)?;
        let glyphs = skeletons
            .into_iter()
            .map(|(ch, sk)| (ch, expand(&sk, font_id)))
            .collect();
        let height = SKELETON_ROWS * ROW_SCALE;
        Ok(Self {
            font_id,
            height,
            baseline: height,
            glyphs,
        })
    }

    pub fn glyph(&self, ch: char) -> Option<&Bitmap> {
        self.glyphs.get(&ch)
    }

    pub fn covers(&self, text: &[char]) -> bool {
        text.iter().all(|c| self.glyphs.contains_key(c))
    }

    /// Horizontal extent of `text` laid out with `spacing` pixels between glyphs.
    pub fn text_width(&self, text: &[char], spacing: usize) -> Result<usize> {
        let mut w = 0;
        for (i, ch) in text.iter().enumerate() {
            let g = self.glyph(*ch).ok_or(Error::OutOfVocab(*ch))?;
            w += g.width;
            if i + 1 < text.len() {
                w += spacing;
            }
        }
        Ok(w)
    }
}

/// Skeletons for the alphabet, re-salting any character whose skeleton
/// collides with an earlier one.
fn distinct_skeletons(alphabet: &[char]) -> Result<Vec<(char, Bitmap)>> {
    let mut out: Vec<(char, Bitmap)> = Vec::with_capacity(alphabet.len());
    for &ch in alphabet {
        if out.iter().any(|(c, _)| *c == ch) {
            return Err(Error::Config(format!("duplicate character {ch:?} in alphabet")));
        }
        let mut salt = 0u64;
        let sk = loop {
            let sk = skeleton(ch, salt);
            if out.iter().all(|(_, other)| *other != sk) {
                break sk;
            }
            salt += 1;
        };
        out.push((ch, sk));
    }
    Ok(out)
}

fn skeleton(ch: char, salt: u64) -> Bitmap {
    let mut rng = ChaCha8Rng::seed_from_u64(((ch as u64) << 16) ^ salt ^ 0x5eed_f0e7);
    let width = rng.gen_range(2..=4);
    loop {
        let mut bm = Bitmap::new(width, SKELETON_ROWS);
        for y in 0..SKELETON_ROWS {
            for x in 0..width {
                bm.set(y, x, rng.gen_bool(0.55));
            }
        }
        let rows_used = (0..SKELETON_ROWS).filter(|&y| (0..width).any(|x| bm.get(y, x))).count();
        if bm.column_set(0) && bm.column_set(width - 1) && rows_used >= 3 {
            return bm;
        }
    }
}

fn expand(sk: &Bitmap, style: u32) -> Bitmap {
    let (col_scale, bold) = match style {
        0 => (1, false),
        1 => (2, false),
        _ => (1, true),
    };
    let width = sk.width * col_scale + usize::from(bold);
    let mut bm = Bitmap::new(width, sk.height * ROW_SCALE);
    for y in 0..sk.height {
        for x in 0..sk.width {
            if !sk.get(y, x) {
                continue;
            }
            for dy in 0..ROW_SCALE {
                for dx in 0..col_scale {
                    bm.set(y * ROW_SCALE + dy, x * col_scale + dx, true);
                    if bold {
                        bm.set(y * ROW_SCALE + dy, x * col_scale + dx + 1, true);
                    }
                }
            }
        }
    }
    bm
}
