//! Resizing text images to the model's input size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::{CharBox, TextSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Keep the aspect ratio at the target height, then right-pad to the target width.
    Line,
    /// Stretch to the target size.
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSize {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub image: Image,
    pub char_boxes: Vec<CharBox>,
}

/// Resizes `sample` to `target`. Line-mode padding uses the image's median
/// level, which for rendered text is the background level.
pub fn preprocess(
    sample: &TextSample,
    mode: ResizeMode,
    target: TargetSize,
    patch_width: usize,
) -> Result<Preprocessed> {
    if patch_width == 0 || target.width % patch_width != 0 {
        return Err(Error::Config(format!(
            "target width {} not divisible by patch width {patch_width}",
            target.width
        )));
    }
    let src = &sample.image;
    let sy = target.height as f64 / src.height as f64;
    let (new_w, sx) = match mode {
        ResizeMode::Word => (target.width, target.width as f64 / src.width as f64),
        ResizeMode::Line => {
            let w = (src.width as f64 * sy).round().max(1.0) as usize;
            if w > target.width {
                return Err(Error::Overflow {
                    needed: w,
                    available: target.width,
                });
            }
            (w, w as f64 / src.width as f64)
        }
    };

    let resized = resize_bilinear(src, target.height, new_w);
    let image = if new_w == target.width {
        resized
    } else {
        let pad = median_level(src);
        let mut out = Image::filled(src.channels, target.height, target.width, pad);
        for c in 0..src.channels {
            for y in 0..target.height {
                for x in 0..new_w {
                    out.set(c, y, x, resized.get(c, y, x));
                }
            }
        }
        out
    };

    let char_boxes = sample
        .char_boxes
        .iter()
        .map(|b| CharBox {
            x0: scale_coord(b.x0, sx, new_w),
            x1: scale_coord(b.x1, sx, new_w),
            y0: scale_coord(b.y0, sy, target.height),
            y1: scale_coord(b.y1, sy, target.height),
        })
        .map(|mut b| {
            if b.x1 <= b.x0 {
                b.x1 = (b.x0 + 1).min(new_w);
                b.x0 = b.x1 - 1;
            }
            if b.y1 <= b.y0 {
                b.y1 = (b.y0 + 1).min(target.height);
                b.y0 = b.y1 - 1;
            }
            b
        })
        .collect();
    Ok(Preprocessed { image, char_boxes })
}

// Rounding is monotone, so abutting boxes stay abutting.
fn scale_coord(v: usize, s: f64, limit: usize) -> usize {
    ((v as f64 * s).round() as usize).min(limit)
}

fn median_level(img: &Image) -> f32 {
    let plane = img.height * img.width;
    let mut v: Vec<f32> = img.data[..plane].to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Bilinear resampling with half-pixel centres; identity when sizes match.
pub fn resize_bilinear(src: &Image, height: usize, width: usize) -> Image {
    if src.height == height && src.width == width {
        return src.clone();
    }
    let mut out = Image::filled(src.channels, height, width, 0.0);
    let fy = src.height as f64 / height as f64;
    let fx = src.width as f64 / width as f64;
    let taps = |dst: usize, f: f64, n: usize| -> (usize, usize, f32) {
        let s = ((dst as f64 + 0.5) * f - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    for y in 0..height {
        let (y0, y1, wy) = taps(y, fy, src.height);
        for x in 0..width {
            let (x0, x1, wx) = taps(x, fx, src.width);
            for c in 0..src.channels {
                let top = src.get(c, y0, x0) * (1.0 - wx) + src.get(c, y0, x1) * wx;
                let bot = src.get(c, y1, x0) * (1.0 - wx) + src.get(c, y1, x1) * wx;
                out.set(c, y, x, top * (1.0 - wy) + bot * wy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, boxes: Vec<CharBox>) -> TextSample {
        let mut image = Image::filled(1, h, w, 0.2);
        image.set(0, 1, 1, 0.9);
        TextSample {
            image,
            text: vec!['a'; boxes.len()],
            char_boxes: boxes,
            font_id: 0,
            seed: 0,
        }
    }

    fn bx(x0: usize, x1: usize, y0: usize, y1: usize) -> CharBox {
        CharBox { x0, x1, y0, y1 }
    }

    const T: TargetSize = TargetSize {
        height: 32,
        width: 128,
    };

    #[test]
    fn line_mode_identity_scale_pads_right() {
        let s = sample(32, 64, vec![bx(3, 9, 4, 20)]);
        let p = preprocess(&s, ResizeMode::Line, T, 4).unwrap();
        assert_eq!(p.char_boxes, s.char_boxes);
        for y in 0..32 {
            for x in 0..64 {
                assert_eq!(p.image.get(0, y, x), s.image.get(0, y, x));
            }
            for x in 64..128 {
                assert_eq!(p.image.get(0, y, x), 0.2);
            }
        }
    }

    #[test]
    fn line_mode_halves() {
        let s = sample(64, 256, vec![bx(10, 20, 0, 64)]);
        let p = preprocess(&s, ResizeMode::Line, T, 4).unwrap();
        assert_eq!(p.char_boxes[0], bx(5, 10, 0, 32));
    }

    #[test]
    fn word_mode_scales_per_axis() {
        let s = sample(32, 100, vec![bx(10, 50, 0, 32), bx(50, 100, 0, 32)]);
        let p = preprocess(&s, ResizeMode::Word, T, 4).unwrap();
        // 128 / 100 = 1.28: 10 -> 12.8, 50 -> 64, 100 -> 128.
        assert_eq!(p.char_boxes[0], bx(13, 64, 0, 32));
        assert_eq!(p.char_boxes[1], bx(64, 128, 0, 32));
        assert!(p.char_boxes.iter().all(|b| b.x1 <= 128));
    }

    #[test]
    fn oversize_line_is_an_error() {
        let s = sample(16, 100, vec![bx(0, 4, 0, 16)]);
        assert!(matches!(
            preprocess(&s, ResizeMode::Line, T, 4),
            Err(Error::Overflow { .. })
        ));
        assert!(preprocess(&s, ResizeMode::Word, T, 5).is_err());
    }

    #[test]
    fn ordering_survives_rescale() {
        let boxes: Vec<_> = (0..10).map(|i| bx(i * 9, i * 9 + 9, 0, 32)).collect();
        let s = sample(32, 90, boxes);
        let p = preprocess(&s, ResizeMode::Word, T, 4).unwrap();
        for w in p.char_boxes.windows(2) {
            assert!(w[0].x1 <= w[1].x0);
            assert!(w[0].x0 < w[0].x1);
        }
    }
}
