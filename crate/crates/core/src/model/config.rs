use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Parallel character-query decoder.
    Query,
    /// Self-attention sequence decoder trained with CTC.
    Ctc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_width: usize,
    pub enc_layers: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    /// Number of character queries.
    pub num_queries: usize,
    /// Classes of the query decoder (characters plus EOS). The CTC head adds a blank.
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f64,
    pub decoder: DecoderKind,
    pub ctc_layers: usize,
    pub regressor_layers: usize,
    pub pixel_decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 16,
            width: 128,
            patch_width: 4,
            enc_layers: 4,
            enc_dim: 128,
            enc_heads: 4,
            dec_layers: 2,
            dec_dim: 128,
            dec_heads: 4,
            num_queries: 25,
            vocab_size: 17,
            mlp_ratio: 4,
            drop_path_rate: 0.1,
            decoder: DecoderKind::Query,
            ctc_layers: 2,
            regressor_layers: 4,
            pixel_decoder_layers: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_width == 0 || self.width % self.patch_width != 0 {
            return bad(format!(
                "patch width {} does not divide image width {}",
                self.patch_width, self.width
            ));
        }
        if self.width / self.patch_width < 2 {
            return bad("need at least two patches".into());
        }
        if self.enc_heads == 0 || self.enc_dim % self.enc_heads != 0 {
            return bad(format!("enc_dim {} not divisible by {} heads", self.enc_dim, self.enc_heads));
        }
        if self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return bad(format!("dec_dim {} not divisible by {} heads", self.dec_dim, self.dec_heads));
        }
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1".into());
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("{} channels; expected 1 or 3", self.channels));
        }
        if self.vocab_size < 2 {
            return bad("vocabulary needs at least one character plus EOS".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop path rate {} outside [0, 1)", self.drop_path_rate));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.width / self.patch_width
    }

    /// Length of one flattened vertical patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.height * self.patch_width
    }

    /// Parameters of the recognition model (encoder plus the configured head).
    ///
    /// With `E = enc_dim`, `D = dec_dim`, `P = patch_dim`, `M = num_patches`,
    /// `r = mlp_ratio`, a self-attention block holds `(4 + 2r)·E² + (9 + r)·E`
    /// parameters (two layer norms, q/kv/out projections, a two-layer MLP):
    ///
    /// * encoder: `P·E + E + M·E + enc_layers·block(E) + 2E`
    /// * query head: `N·D + [E·D + D if E ≠ D] + dec_layers·((8 + 2r)·D² + (15 + r)·D)
    ///   + 2D + D·V + V`
    /// * CTC head: `ctc_layers·block(E) + 2E + E·(V+1) + (V+1)`
    pub fn param_count(&self) -> usize {
        let (e, d, r) = (self.enc_dim, self.dec_dim, self.mlp_ratio);
        let self_block = |x: usize| (4 + 2 * r) * x * x + (9 + r) * x;
        let encoder = self.patch_dim() * e + e + self.num_patches() * e + self.enc_layers * self_block(e) + 2 * e;
        let head = match self.decoder {
            DecoderKind::Query => {
                let proj = if e != d { e * d + d } else { 0 };
                let dec_block = (8 + 2 * r) * d * d + (15 + r) * d;
                self.num_queries * d
                    + proj
                    + self.dec_layers * dec_block
                    + 2 * d
                    + d * self.vocab_size
                    + self.vocab_size
            }
            DecoderKind::Ctc => {
                let v = self.vocab_size + 1;
                self.ctc_layers * self_block(e) + 2 * e + e * v + v
            }
        };
        encoder + head
    }

    /// True when parameters saved under `other` load into a model built from `self`.
    pub fn compatible_with(&self, other: &ModelConfig) -> Result<()> {
        let pairs = [
            ("channels", self.channels, other.channels),
            ("height", self.height, other.height),
            ("width", self.width, other.width),
            ("patch_width", self.patch_width, other.patch_width),
            ("enc_layers", self.enc_layers, other.enc_layers),
            ("enc_dim", self.enc_dim, other.enc_dim),
            ("enc_heads", self.enc_heads, other.enc_heads),
            ("mlp_ratio", self.mlp_ratio, other.mlp_ratio),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::Checkpoint(format!("config mismatch on {name}: {a} vs {b}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_scale_patch_geometry() {
        let cfg = ModelConfig {
            height: 32,
            width: 128,
            ..Default::default()
        };
        assert_eq!(cfg.num_patches(), 32);
        assert_eq!(cfg.patch_dim(), 384);
        let cfg8 = ModelConfig {
            patch_width: 8,
            ..cfg
        };
        assert_eq!(cfg8.num_patches(), 16);
        assert_eq!(cfg8.patch_dim(), 768);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            patch_width: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            enc_heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            num_queries: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
