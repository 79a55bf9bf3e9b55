//! Text recognition with a vertical-patch transformer encoder and a parallel
//! character-query decoder, pretrained in two self-supervised stages:
//!
//! 1. masked image modeling on the encoder ([`pretrain::visual`]),
//! 2. masked image-language modeling on the decoder with the encoder frozen
//!    ([`pretrain::language`]),
//!
//! followed by supervised finetuning ([`harness`]). [`synth`] renders the
//! synthetic text images with character boxes that stage 2 needs.

pub mod data;
pub mod error;
pub mod harness;
pub mod image;
pub mod losses;
pub mod model;
pub mod pretrain;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
