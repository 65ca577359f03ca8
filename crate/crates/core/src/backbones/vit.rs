//! Plain vision transformer with a constant token grid across stages.

use candle_core::{Module, Tensor, D};
use candle_nn::Conv2d;

use crate::error::Result;
use crate::feature::{spatial_to_tokens, StageShape};
use crate::nn::{conv2d, gelu, linear, matmul, padded, LayerNorm, Linear};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct TinyVitConfig {
    pub in_channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depths: [usize; 4],
    pub heads: usize,
    pub mlp_hidden: usize,
    pub input_size: usize,
    pub num_classes: usize,
}

impl TinyVitConfig {
    pub fn reference(input_size: usize, num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            patch: 4,
            dim: 48,
            depths: [2, 2, 2, 2],
            heads: 3,
            mlp_hidden: 96,
            input_size,
            num_classes,
        }
    }

    pub fn num_tokens(&self) -> usize {
        let side = self.input_size / self.patch;
        side * side
    }

    pub fn stage_shapes(&self) -> [StageShape; 4] {
        [StageShape::Tokens {
            tokens: self.num_tokens(),
            dim: self.dim,
        }; 4]
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(store: &mut ParamStore, p: &str, cfg: &TinyVitConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
            qkv: linear(store, &format!("{p}.attn.qkv"), d, 3 * d, true)?,
            proj: linear(store, &format!("{p}.attn.proj"), d, d, true)?,
            norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
            fc1: linear(store, &format!("{p}.mlp.fc1"), d, cfg.mlp_hidden, true)?,
            fc2: linear(store, &format!("{p}.mlp.fc2"), cfg.mlp_hidden, d, true)?,
            heads: cfg.heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (matmul(&q, &k.t()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = matmul(&attn, &v)?.transpose(1, 2)?.reshape((b, n, d))?;
        Ok(self.proj.forward(&out)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        let h = gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TinyVit {
    patch_embed: Conv2d,
    pos_embed: Tensor,
    stages: Vec<Vec<Block>>,
    norm: LayerNorm,
    fc: Linear,
}

impl TinyVit {
    pub fn new(cfg: &TinyVitConfig, store: &mut ParamStore) -> Result<Self> {
        let patch_embed = conv2d(
            store,
            "stage1.patch_embed",
            cfg.in_channels,
            cfg.dim,
            cfg.patch,
            padded(0, cfg.patch),
        )?;
        let pos_embed = store.get(
            "stage1.pos_embed",
            &[1, cfg.num_tokens(), cfg.dim],
            Init::Normal(0.02),
        )?;
        let mut stages = Vec::with_capacity(4);
        for (s, &depth) in cfg.depths.iter().enumerate() {
            let blocks = (0..depth)
                .map(|j| Block::new(store, &format!("stage{}.block{j}", s + 1), cfg))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        Ok(Self {
            patch_embed,
            pos_embed,
            stages,
            norm: LayerNorm::new(store, "head.norm", cfg.dim)?,
            fc: linear(store, "head.fc", cfg.dim, cfg.num_classes, true)?,
        })
    }

    pub fn forward_stage(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let mut x = if i == 1 {
            let tokens = spatial_to_tokens(&self.patch_embed.forward(x)?)?;
            tokens.broadcast_add(&self.pos_embed)?
        } else {
            x.clone()
        };
        for block in &self.stages[i - 1] {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    pub fn head(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = self.norm.forward(x)?.mean(1)?;
        Ok(self.fc.forward(&pooled)?)
    }
}
