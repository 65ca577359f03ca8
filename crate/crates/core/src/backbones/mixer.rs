//! MLP-Mixer: alternating token-mixing and channel-mixing MLPs.

use candle_core::{Module, Tensor};
use candle_nn::Conv2d;

use crate::error::Result;
use crate::feature::{spatial_to_tokens, StageShape};
use crate::nn::{conv2d, gelu, linear, padded, LayerNorm, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyMixerConfig {
    pub in_channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depths: [usize; 4],
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub input_size: usize,
    pub num_classes: usize,
}

impl TinyMixerConfig {
    pub fn reference(input_size: usize, num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            patch: 4,
            dim: 48,
            depths: [2, 2, 2, 2],
            token_hidden: 32,
            channel_hidden: 96,
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
struct MixerBlock {
    norm1: LayerNorm,
    token_fc1: Linear,
    token_fc2: Linear,
    norm2: LayerNorm,
    channel_fc1: Linear,
    channel_fc2: Linear,
}

impl MixerBlock {
    fn new(store: &mut ParamStore, p: &str, cfg: &TinyMixerConfig) -> Result<Self> {
        let (n, d) = (cfg.num_tokens(), cfg.dim);
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
            token_fc1: linear(store, &format!("{p}.token_mlp.fc1"), n, cfg.token_hidden, true)?,
            token_fc2: linear(store, &format!("{p}.token_mlp.fc2"), cfg.token_hidden, n, true)?,
            norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
            channel_fc1: linear(store, &format!("{p}.channel_mlp.fc1"), d, cfg.channel_hidden, true)?,
            channel_fc2: linear(store, &format!("{p}.channel_mlp.fc2"), cfg.channel_hidden, d, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?.transpose(1, 2)?;
        let h = self.token_fc2.forward(&gelu(&self.token_fc1.forward(&h)?)?)?;
        let x = (x + h.transpose(1, 2)?)?;
        let h = gelu(&self.channel_fc1.forward(&self.norm2.forward(&x)?)?)?;
        Ok((&x + self.channel_fc2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TinyMixer {
    patch_embed: Conv2d,
    stages: Vec<Vec<MixerBlock>>,
    norm: LayerNorm,
    fc: Linear,
}

impl TinyMixer {
    pub fn new(cfg: &TinyMixerConfig, store: &mut ParamStore) -> Result<Self> {
        let patch_embed = conv2d(
            store,
            "stage1.patch_embed",
            cfg.in_channels,
            cfg.dim,
            cfg.patch,
            padded(0, cfg.patch),
        )?;
        let mut stages = Vec::with_capacity(4);
        for (s, &depth) in cfg.depths.iter().enumerate() {
            let blocks = (0..depth)
                .map(|j| MixerBlock::new(store, &format!("stage{}.block{j}", s + 1), cfg))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        Ok(Self {
            patch_embed,
            stages,
            norm: LayerNorm::new(store, "head.norm", cfg.dim)?,
            fc: linear(store, "head.fc", cfg.dim, cfg.num_classes, true)?,
        })
    }

    pub fn forward_stage(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let mut x = if i == 1 {
            spatial_to_tokens(&self.patch_embed.forward(x)?)?
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
