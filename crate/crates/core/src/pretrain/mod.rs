//! Self-supervised pretraining stages: masked image modeling for the encoder
//! and masked image-language modeling for the decoder.

pub mod language;
pub mod visual;

pub use language::{pretrain_decoder, sample_char_mask, CharMaskPlan, LanguagePretrainConfig};
pub use visual::{sample_patch_mask, MaskPlan, MimHead, TargetMode, VisualPretrainConfig, VisualPretrainer};
