//! In-memory prepared datasets, batching, and optional augmentation.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::label::{encode_label, LabelSeq};
use super::patches::char_boxes_to_patch_indices;
use super::preprocess::{preprocess, ResizeMode, TargetSize};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::{CharBox, TextSample};

#[derive(Debug, Clone)]
pub struct Example {
    pub image: Image,
    pub text: Vec<char>,
    pub label: LabelSeq,
    pub char_boxes: Vec<CharBox>,
    /// Patch indices covered by each character.
    pub char_patches: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub examples: Vec<Example>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f32,
    pub brightness_jitter: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            max_rotation_deg: 2.0,
            brightness_jitter: 0.1,
        }
    }
}

impl PreparedSet {
    pub fn from_samples(
        samples: &[TextSample],
        vocab: &Vocab,
        mode: ResizeMode,
        target: TargetSize,
        patch_width: usize,
        num_queries: usize,
    ) -> Result<Self> {
        let mut examples = Vec::with_capacity(samples.len());
        let mut channels = None;
        for s in samples {
            let p = preprocess(s, mode, target, patch_width)?;
            if *channels.get_or_insert(p.image.channels) != p.image.channels {
                return Err(Error::Shape("mixed channel counts in dataset".into()));
            }
            let label = encode_label(&s.text, vocab, num_queries)?;
            let char_patches = char_boxes_to_patch_indices(&p.char_boxes, patch_width, target.width)?;
            examples.push(Example {
                image: p.image,
                text: s.text.clone(),
                label,
                char_boxes: p.char_boxes,
                char_patches,
            });
        }
        Ok(Self {
            examples,
            channels: channels.unwrap_or(3),
            height: target.height,
            width: target.width,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// First `n` examples (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            examples: self.examples.iter().take(n).cloned().collect(),
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    /// Stacks the chosen images into a `B × C × H × W` tensor.
    pub fn images(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        self.images_augmented(indices, device, None)
    }

    /// Like [`PreparedSet::images`], augmenting each image with an RNG derived
    /// from `(seed, epoch, sample index)` when `augment` is enabled.
    pub fn images_augmented(
        &self,
        indices: &[usize],
        device: &Device,
        augment: Option<(&AugmentConfig, u64, usize)>,
    ) -> Result<Tensor> {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            let img = &self.examples[i].image;
            match augment {
                Some((cfg, seed, epoch)) if cfg.enabled => {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        seed ^ ((epoch as u64) << 40) ^ ((i as u64) << 8) ^ 0xa06,
                    );
                    data.extend_from_slice(&augment_image(img, cfg, &mut rng).data);
                }
                _ => data.extend_from_slice(&img.data),
            }
        }
        Ok(Tensor::from_vec(
            data,
            (indices.len(), self.channels, self.height, self.width),
            device,
        )?)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<LabelSeq> {
        indices.iter().map(|&i| self.examples[i].label.clone()).collect()
    }
}

/// Small rotation about the centre plus a global brightness scale.
pub fn augment_image(img: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    let angle = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
    let gain = 1.0 + rng.gen_range(-cfg.brightness_jitter..=cfg.brightness_jitter);
    let (sin, cos) = angle.sin_cos();
    let (cy, cx) = (img.height as f32 / 2.0, img.width as f32 / 2.0);
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
            let sx = (cos * dx + sin * dy + cx - 0.5).round();
            let sy = (-sin * dx + cos * dy + cy - 0.5).round();
            let (sx, sy) = (
                sx.clamp(0.0, (img.width - 1) as f32) as usize,
                sy.clamp(0.0, (img.height - 1) as f32) as usize,
            );
            for c in 0..img.channels {
                out.set(c, y, x, (img.get(c, sy, sx) * gain).clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render, Canvas, GlyphFont, Style};

    fn set() -> PreparedSet {
        let alphabet: Vec<char> = ('a'..='p').collect();
        let font = GlyphFont::procedural(0, &alphabet).unwrap();
        let style = Style {
            bg_level: 0.1,
            fg_level: 0.9,
            noise_sigma: 0.0,
            spacing_px: 1,
        };
        let canvas = Canvas {
            channels: 3,
            height: 16,
            width: 64,
        };
        let samples: Vec<_> = (0..5)
            .map(|i| render(&['a', 'b', 'c'], &font, &style, &canvas, i).unwrap())
            .collect();
        let vocab = Vocab::new(alphabet).unwrap();
        let target = TargetSize {
            height: 16,
            width: 64,
        };
        PreparedSet::from_samples(&samples, &vocab, ResizeMode::Line, target, 4, 10).unwrap()
    }

    #[test]
    fn batches_have_expected_shape() {
        let s = set();
        let t = s.images(&[0, 2, 4], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 3, 16, 64]);
        assert_eq!(s.labels(&[1])[0].true_length, 3);
        assert!(s.examples[0].char_patches.iter().flatten().all(|&p| p < 16));
    }

    #[test]
    fn augmentation_is_reproducible_and_off_by_default() {
        let s = set();
        let cfg = AugmentConfig {
            enabled: true,
            ..Default::default()
        };
        let plain = s.images(&[1], &Device::Cpu).unwrap();
        let off = s
            .images_augmented(&[1], &Device::Cpu, Some((&AugmentConfig::default(), 0, 0)))
            .unwrap();
        let a = s.images_augmented(&[1], &Device::Cpu, Some((&cfg, 3, 2))).unwrap();
        let b = s.images_augmented(&[1], &Device::Cpu, Some((&cfg, 3, 2))).unwrap();
        let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&plain), v(&off));
        assert_eq!(v(&a), v(&b));
    }
}
