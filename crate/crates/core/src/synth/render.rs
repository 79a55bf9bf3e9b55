//! Rasterizes text into images with exact per-character boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::font::GlyphFont;
use crate::error::{Error, Result};
use crate::image::Image;

/// Axis-aligned box in pixel units; `x1` and `y1` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharBox {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl CharBox {
    pub fn to_array(self) -> [usize; 4] {
        [self.x0, self.x1, self.y0, self.y1]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self {
            x0: a[0],
            x1: a[1],
            y0: a[2],
            y1: a[3],
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub bg_level: f32,
    pub fg_level: f32,
    pub noise_sigma: f32,
    pub spacing_px: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextSample {
    pub image: Image,
    pub text: Vec<char>,
    pub char_boxes: Vec<CharBox>,
    pub font_id: u32,
    pub seed: u64,
}

impl TextSample {
    pub fn text_string(&self) -> String {
        self.text.iter().collect()
    }
}

/// Renders `text` left to right starting at a small seeded left margin.
pub fn render(
    text: &[char],
    font: &GlyphFont,
    style: &Style,
    canvas: &Canvas,
    seed: u64,
) -> Result<TextSample> {
    if text.is_empty() {
        return Err(Error::Config("cannot render empty text".into()));
    }
    if !matches!(canvas.channels, 1 | 3) {
        return Err(Error::Config(format!("{} channels; expected 1 or 3", canvas.channels)));
    }
    if style.fg_level == style.bg_level {
        return Err(Error::Config("foreground and background levels coincide".into()));
    }
    if font.height > canvas.height {
        return Err(Error::Config(format!(
            "glyph height {} exceeds canvas height {}",
            font.height, canvas.height
        )));
    }
    let needed = font.text_width(text, style.spacing_px)?;
    if needed > canvas.width {
        return Err(Error::Overflow {
            needed,
            available: canvas.width,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slack = canvas.width - needed;
    let mut x = rng.gen_range(0..=slack.min(canvas.height / 2));
    let top = (canvas.height - font.height) / 2;
    let bottom = top + font.height;

    let mut gray = vec![style.bg_level; canvas.height * canvas.width];
    let mut boxes = Vec::with_capacity(text.len());
    for ch in text {
        let glyph = font.glyph(*ch).ok_or(Error::OutOfVocab(*ch))?;
        for gy in 0..glyph.height {
            for gx in 0..glyph.width {
                if glyph.get(gy, gx) {
                    gray[(top + gy) * canvas.width + x + gx] = style.fg_level;
                }
            }
        }
        boxes.push(CharBox {
            x0: x,
            x1: x + glyph.width,
            y0: top,
            y1: bottom,
        });
        x += glyph.width + style.spacing_px;
    }

    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, style.noise_sigma)
            .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
        for v in &mut gray {
            *v += normal.sample(&mut rng);
        }
    }

    let mut image = Image::filled(canvas.channels, canvas.height, canvas.width, 0.0);
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            image.set_all(y, x, gray[y * canvas.width + x].clamp(0.0, 1.0));
        }
    }

    Ok(TextSample {
        image,
        text: text.to_vec(),
        char_boxes: boxes,
        font_id: font.font_id,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn font() -> GlyphFont {
        GlyphFont::procedural(0, &('a'..='p').collect::<Vec<_>>()).unwrap()
    }

    fn style(noise: f32) -> Style {
        Style {
            bg_level: 0.1,
            fg_level: 0.9,
            noise_sigma: noise,
            spacing_px: 2,
        }
    }

    const CANVAS: Canvas = Canvas {
        channels: 3,
        height: 16,
        width: 64,
    };

    #[test]
    fn noiseless_single_glyph_matches_bitmap() {
        let f = font();
        let s = render(&['a'], &f, &style(0.0), &CANVAS, 1).unwrap();
        let b = s.char_boxes[0];
        let g = f.glyph('a').unwrap();
        assert_eq!(b.x1 - b.x0, g.width);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let expect = if g.get(y - b.y0, x - b.x0) { 0.9 } else { 0.1 };
                for c in 0..3 {
                    assert_eq!(s.image.get(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn boxes_are_ordered() {
        let s = render(&['a', 'b'], &font(), &style(0.05), &CANVAS, 2).unwrap();
        assert!(s.char_boxes[0].x1 <= s.char_boxes[1].x0);
    }

    #[test]
    fn foreground_count_matches_bitmaps() {
        let f = font();
        let text = ['c', 'f', 'k'];
        let s = render(&text, &f, &style(0.0), &CANVAS, 3).unwrap();
        let expected: usize = text.iter().map(|c| f.glyph(*c).unwrap().count_set()).sum();
        let mut counted = 0;
        for b in &s.char_boxes {
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    if s.image.get(0, y, x) == 0.9 {
                        counted += 1;
                    }
                }
            }
        }
        assert_eq!(counted, expected);
    }

    #[test]
    fn overflow_is_reported() {
        let text = vec!['a'; 40];
        let err = render(&text, &font(), &style(0.0), &CANVAS, 0).unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
    }

    #[test]
    fn identical_inputs_render_identically() {
        let a = render(&['a', 'p', 'c'], &font(), &style(0.1), &CANVAS, 9).unwrap();
        let b = render(&['a', 'p', 'c'], &font(), &style(0.1), &CANVAS, 9).unwrap();
        assert_eq!(a, b);
    }
}
