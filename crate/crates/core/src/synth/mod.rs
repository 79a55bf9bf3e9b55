//! Deterministic synthetic text images with character boxes.

pub mod corpus;
pub mod dataset;
pub mod font;
pub mod render;

pub use corpus::{sample_text, CorpusSpec};
pub use dataset::{
    build_dataset, synthesize_sample, DatasetSpec, Manifest, ManifestHeader, ManifestRecord,
    Split, SplitFractions, StyleRanges, MANIFEST_NAME,
};
pub use font::{Bitmap, GlyphFont};
pub use render::{render, Canvas, CharBox, Style, TextSample};
