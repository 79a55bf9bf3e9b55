//! Vocabularies, labels, preprocessing, and character-to-patch mapping.

pub mod label;
pub mod loader;
pub mod patches;
pub mod preprocess;
pub mod vocab;

pub use label::{encode_label, LabelSeq};
pub use loader::{AugmentConfig, Example, PreparedSet};
pub use patches::char_boxes_to_patch_indices;
pub use preprocess::{preprocess, resize_bilinear, Preprocessed, ResizeMode, TargetSize};
pub use vocab::Vocab;
