//! On-disk datasets: PNG images plus a line-delimited JSON manifest.
//!
//! The first manifest line is a header object `{"header": {...}}`; every other
//! line is one [`ManifestRecord`].

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{sample_text, CorpusSpec};
use super::font::GlyphFont;
use super::render::{render, Canvas, CharBox, Style, TextSample};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const MANIFEST_VERSION: u32 = 1;

/// Inclusive ranges that per-sample styles are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleRanges {
    pub bg_level: (f32, f32),
    pub fg_level: (f32, f32),
    pub noise_sigma: (f32, f32),
    pub spacing_px: (usize, usize),
    /// Font ids samples may use.
    pub fonts: Vec<u32>,
}

impl StyleRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> (Style, u32) {
        fn uni(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        }
        let style = Style {
            bg_level: uni(rng, self.bg_level),
            fg_level: uni(rng, self.fg_level),
            noise_sigma: uni(rng, self.noise_sigma),
            spacing_px: rng.gen_range(self.spacing_px.0..=self.spacing_px.1),
        };
        let font = self.fonts[rng.gen_range(0..self.fonts.len())];
        (style, font)
    }

    fn validate(&self) -> Result<()> {
        if self.fonts.is_empty() {
            return Err(Error::Config("style ranges list no fonts".into()));
        }
        let overlap = self.fg_level.0 <= self.bg_level.1 && self.bg_level.0 <= self.fg_level.1;
        if overlap {
            return Err(Error::Config("foreground and background level ranges overlap".into()));
        }
        if self.spacing_px.0 > self.spacing_px.1 {
            return Err(Error::Config("empty spacing range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitFractions {
    /// Contiguous index ranges: train first, then val, then test.
    pub fn split_of(&self, index: usize, size: usize) -> Split {
        let total = self.train + self.val + self.test;
        let n_train = ((self.train / total) * size as f64).round() as usize;
        let n_val = ((self.val / total) * size as f64).round() as usize;
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub size: usize,
    pub seed: u64,
    pub canvas: Canvas,
    pub splits: SplitFractions,
    pub alphabet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image path relative to the manifest directory.
    pub path: String,
    pub text: String,
    pub char_boxes: Vec<[usize; 4]>,
    pub font_id: u32,
    pub seed: u64,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub corpus: CorpusSpec,
    pub style: StyleRanges,
    pub canvas: Canvas,
    pub splits: SplitFractions,
}

/// Renders sample `index` of a dataset seeded with `seed`.
///
/// The per-sample seed is `seed ^ index`, so samples can be produced in any
/// order. Texts that overflow the canvas are re-drawn with a bumped sub-seed.
pub fn synthesize_sample(
    spec: &DatasetSpec,
    fonts: &[GlyphFont],
    seed: u64,
    index: usize,
) -> Result<TextSample> {
    let sample_seed = seed ^ index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let (style, font_id) = spec.style.sample(&mut rng);
    let font = fonts
        .iter()
        .find(|f| f.font_id == font_id)
        .ok_or_else(|| Error::Config(format!("font {font_id} not supplied")))?;
    for attempt in 0..64u64 {
        let text = sample_text(&spec.corpus, sample_seed.wrapping_add(attempt << 40))?;
        match render(&text, font, &style, &spec.canvas, sample_seed) {
            Err(Error::Overflow { .. }) => continue,
            other => return other,
        }
    }
    Err(Error::Config(format!(
        "sample {index}: no text fitting width {} after 64 draws",
        spec.canvas.width
    )))
}

/// Writes `size` PNG images under `out_dir/images` and the manifest; returns the manifest path.
pub fn build_dataset(
    spec: &DatasetSpec,
    fonts: &[GlyphFont],
    size: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<PathBuf> {
    spec.corpus.validate()?;
    spec.style.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let file = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    let header = HeaderLine {
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            size,
            seed,
            canvas: spec.canvas,
            splits: spec.splits,
            alphabet: spec.corpus.alphabet.iter().collect(),
        },
    };
    write_json_line(&mut w, &header, &manifest_path)?;
    for index in 0..size {
        let sample = synthesize_sample(spec, fonts, seed, index)?;
        let rel = format!("images/{index:06}.png");
        sample.image.save_png(&out_dir.join(&rel))?;
        let record = ManifestRecord {
            path: rel,
            text: sample.text_string(),
            char_boxes: sample.char_boxes.iter().map(|b| b.to_array()).collect(),
            font_id: sample.font_id,
            seed: sample.seed,
            split: spec.splits.split_of(index, size),
        };
        write_json_line(&mut w, &record, &manifest_path)?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

fn write_json_line<T: Serialize>(w: &mut impl Write, value: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::format(path, e))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(path, "missing header line"))?
            .map_err(|e| Error::io(path, e))?;
        let header: HeaderLine = serde_json::from_str(&first).map_err(|e| Error::format(path, e))?;
        if header.header.version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("manifest version {} unsupported", header.header.version),
            ));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 2)))?;
            records.push(rec);
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            header: header.header,
            records,
        })
    }

    pub fn load_sample(&self, record: &ManifestRecord) -> Result<TextSample> {
        let image = Image::load_png(&self.root.join(&record.path))?;
        Ok(TextSample {
            image,
            text: record.text.chars().collect(),
            char_boxes: record.char_boxes.iter().map(|a| CharBox::from_array(*a)).collect(),
            font_id: record.font_id,
            seed: record.seed,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<TextSample>> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| self.load_sample(r))
            .collect()
    }

    pub fn load_all(&self) -> Result<Vec<TextSample>> {
        self.records.iter().map(|r| self.load_sample(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        let alphabet: Vec<char> = ('a'..='p').collect();
        DatasetSpec {
            corpus: CorpusSpec::peaked(alphabet, 0.8, (3, 8), 10, 0),
            style: StyleRanges {
                bg_level: (0.0, 0.2),
                fg_level: (0.7, 1.0),
                noise_sigma: (0.0, 0.05),
                spacing_px: (1, 2),
                fonts: vec![0, 1, 2],
            },
            canvas: Canvas {
                channels: 3,
                height: 16,
                width: 128,
            },
            splits: SplitFractions {
                train: 0.6,
                val: 0.2,
                test: 0.2,
            },
        }
    }

    fn fonts(spec: &DatasetSpec) -> Vec<GlyphFont> {
        (0..3)
            .map(|i| GlyphFont::procedural(i, &spec.corpus.alphabet).unwrap())
            .collect()
    }

    #[test]
    fn ten_records_all_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let path = build_dataset(&s, &fonts(&s), 10, dir.path(), 3).unwrap();
        let m = Manifest::read(&path).unwrap();
        assert_eq!(m.records.len(), 10);
        for r in &m.records {
            assert!(dir.path().join(&r.path).exists());
        }
        assert_eq!(m.records.iter().filter(|r| r.split == Split::Train).count(), 6);
        let loaded = m.load_all().unwrap();
        assert_eq!(loaded[4].text_string(), m.records[4].text);
    }

    #[test]
    fn manifests_are_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let s = spec();
        let f = fonts(&s);
        let pa = build_dataset(&s, &f, 6, a.path(), 11).unwrap();
        let pb = build_dataset(&s, &f, 6, b.path(), 11).unwrap();
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
        assert_eq!(
            fs::read(a.path().join("images/000003.png")).unwrap(),
            fs::read(b.path().join("images/000003.png")).unwrap()
        );
    }

    #[test]
    fn empty_dataset_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let path = build_dataset(&s, &fonts(&s), 0, dir.path(), 3).unwrap();
        assert!(Manifest::read(&path).unwrap().records.is_empty());
    }

    #[test]
    fn unwritable_dir_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let s = spec();
        let err = build_dataset(&s, &fonts(&s), 1, &blocker, 0).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
