//! Transformer building blocks: pre-norm attention and MLP blocks with drop path.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{gelu, softmax_last_dim, standardize_last_dim};
use super::params::Init;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;

/// Forward-pass mode. Training mode owns the RNG used for drop path.
pub struct Ctx {
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// Stochastic depth: zeroes the residual branch per sample with probability `rate`.
    pub fn drop_path(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        let rng = match (&mut self.rng, rate > 0.0) {
            (Some(rng), true) => rng,
            _ => return Ok(x.clone()),
        };
        let b = x.dim(0)?;
        let keep = 1.0 - rate;
        let mask: Vec<f32> = (0..b)
            .map(|_| if rng.gen_bool(keep) { (1.0 / keep) as f32 } else { 0.0 })
            .collect();
        let mut shape = vec![1usize; x.rank()];
        shape[0] = b;
        let mask = Tensor::from_vec(mask, shape, x.device())?.to_dtype(x.dtype())?;
        Ok(x.broadcast_mul(&mask)?)
    }
}

pub fn linear(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
    let w = init.xavier(format!("{name}.weight"), fan_out, fan_in)?;
    let b = init.constant(format!("{name}.bias"), &[fan_out], 0.0)?;
    Ok(Linear::new(w, Some(b)))
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.constant(format!("{name}.weight"), &[dim], 1.0)?,
            bias: init.constant(format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = standardize_last_dim(x, LN_EPS)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Multi-head attention with separate query and key/value projections, so the
/// same module serves self-attention (`context == x`) and cross-attention.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: linear(init, &format!("{name}.q"), dim, dim)?,
            kv: linear(init, &format!("{name}.kv"), dim, 2 * dim)?,
            proj: linear(init, &format!("{name}.proj"), dim, dim)?,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    /// `x`: `B × Tq × D`, `context`: `B × Tk × D`, `key_bias`: optional `B × 1 × 1 × Tk`.
    pub fn forward(&self, x: &Tensor, context: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, d) = x.dims3()?;
        let tk = context.dim(1)?;
        let dh = d / self.heads;
        let q = self
            .q
            .forward(x)?
            .reshape((b, tq, self.heads, dh))?
            .transpose(1, 2)?
            .contiguous()?;
        let kv = self.kv.forward(context)?.reshape((b, tk, 2, self.heads, dh))?;
        let k = kv.narrow(2, 0, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let v = kv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?)? * self.scale)?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = softmax_last_dim(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
        Ok(self.proj.forward(&out)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(init, &format!("{name}.fc1"), dim, hidden)?,
            fc2: linear(init, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)?)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct SelfBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    drop_path: f64,
}

impl SelfBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, mlp_ratio: usize, drop_path: f64) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
            drop_path,
        })
    }

    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + ctx.drop_path(&self.attn.forward(&h, &h, key_bias)?, self.drop_path)?)?;
        let h = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((&x + ctx.drop_path(&h, self.drop_path)?)?)
    }
}

/// Pre-norm cross-attention block (no self-attention), as used by the latent regressor.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    drop_path: f64,
}

impl CrossBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, mlp_ratio: usize, drop_path: f64) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(init, &format!("{name}.norm_q"), dim)?,
            norm_kv: LayerNorm::new(init, &format!("{name}.norm_kv"), dim)?,
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
            drop_path,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor, key_bias: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        let a = self
            .attn
            .forward(&self.norm_q.forward(x)?, &self.norm_kv.forward(context)?, key_bias)?;
        let x = (x + ctx.drop_path(&a, self.drop_path)?)?;
        let h = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((&x + ctx.drop_path(&h, self.drop_path)?)?)
    }
}

/// Pre-norm DETR-style decoder block: self-attention over queries, then
/// cross-attention to the memory, then an MLP.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    mlp: Mlp,
    drop_path: f64,
}

impl DecoderBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, mlp_ratio: usize, drop_path: f64) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim)?,
            self_attn: Attention::new(init, &format!("{name}.self_attn"), dim, heads)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim)?,
            cross_attn: Attention::new(init, &format!("{name}.cross_attn"), dim, heads)?,
            norm3: LayerNorm::new(init, &format!("{name}.norm3"), dim)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
            drop_path,
        })
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + ctx.drop_path(&self.self_attn.forward(&h, &h, None)?, self.drop_path)?)?;
        let h = self.norm2.forward(&x)?;
        let x = (&x + ctx.drop_path(&self.cross_attn.forward(&h, memory, None)?, self.drop_path)?)?;
        let h = self.mlp.forward(&self.norm3.forward(&x)?)?;
        Ok((&x + ctx.drop_path(&h, self.drop_path)?)?)
    }
}

/// Linearly increasing drop-path rates across `depth` blocks, ending at `max`.
pub fn drop_path_schedule(max: f64, depth: usize) -> Vec<f64> {
    if depth <= 1 {
        return vec![max; depth];
    }
    (0..depth).map(|i| max * i as f64 / (depth - 1) as f64).collect()
}
