//! Residual CNN: four stride-2 stages of two 3×3 convolutions each.

use candle_core::{Module, Tensor};
use candle_nn::Conv2d;

use crate::error::Result;
use crate::feature::StageShape;
use crate::nn::{conv2d, linear, padded, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyCnnConfig {
    pub in_channels: usize,
    pub channels: [usize; 4],
    pub input_size: usize,
    pub num_classes: usize,
}

impl TinyCnnConfig {
    pub fn reference(input_size: usize, num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            channels: [16, 32, 64, 128],
            input_size,
            num_classes,
        }
    }

    pub fn stage_shapes(&self) -> [StageShape; 4] {
        std::array::from_fn(|i| {
            let side = self.input_size >> (i + 1);
            StageShape::Spatial {
                channels: self.channels[i],
                height: side,
                width: side,
            }
        })
    }
}

#[derive(Debug, Clone)]
struct ResidualStage {
    conv_a: Conv2d,
    conv_b: Conv2d,
    shortcut: Conv2d,
}

impl ResidualStage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv_a.forward(x)?.relu()?;
        let h = self.conv_b.forward(&h)?;
        Ok((h + self.shortcut.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct TinyCnn {
    stages: Vec<ResidualStage>,
    fc: Linear,
}

impl TinyCnn {
    pub fn new(cfg: &TinyCnnConfig, store: &mut ParamStore) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut c_in = cfg.in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            stages.push(ResidualStage {
                conv_a: conv2d(store, &format!("{p}.conv_a"), c_in, c, 3, padded(1, 2))?,
                conv_b: conv2d(store, &format!("{p}.conv_b"), c, c, 3, padded(1, 1))?,
                shortcut: conv2d(store, &format!("{p}.shortcut"), c_in, c, 1, padded(0, 2))?,
            });
            c_in = c;
        }
        let fc = linear(store, "head.fc", c_in, cfg.num_classes, true)?;
        Ok(Self { stages, fc })
    }

    pub fn forward_stage(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        self.stages[i - 1].forward(x)
    }

    pub fn head(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean((2, 3))?;
        Ok(self.fc.forward(&pooled)?)
    }
}
