//! Learned channel projection plus fixed bilinear resampling, mapping a
//! feature of one stage shape onto another.
//!
//! Used for the RAA output aligners, the feedback projector of AFP and the
//! FitNet regressors.

use candle_core::{DType, Module, Tensor};
use candle_nn::Conv2d;

use crate::error::{Error, Result};
use crate::feature::{spatial_into_layout, StageFeature, StageShape};
use crate::nn::{conv2d, padded, Resample2d, ResampleKind};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct StageAligner {
    proj: Conv2d,
    resample: Resample2d,
    source: StageShape,
    target: StageShape,
}

impl StageAligner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        source: StageShape,
        target: StageShape,
    ) -> Result<Self> {
        let proj = conv2d(
            store,
            &format!("{name}.proj"),
            source.channels(),
            target.channels(),
            1,
            padded(0, 1),
        )?;
        let resample = Resample2d::new(
            ResampleKind::Bilinear,
            source.grid()?,
            target.grid()?,
            store.dtype(),
        )?;
        Ok(Self {
            proj,
            resample,
            source,
            target,
        })
    }

    /// Parameters of one aligner between the two shapes.
    pub fn parameter_count(source: &StageShape, target: &StageShape) -> usize {
        source.channels() * target.channels() + target.channels()
    }

    pub fn source(&self) -> StageShape {
        self.source
    }

    pub fn target(&self) -> StageShape {
        self.target
    }

    /// Maps a `(B, C, h, w)` map on the source grid to the target shape.
    pub fn forward_spatial(&self, map: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = map.dims4()?;
        let (sh, sw) = self.resample.from;
        if c != self.source.channels() || (h, w) != (sh, sw) {
            return Err(Error::Alignment(format!(
                "aligner expects {} input, got (B,{c},{h},{w})",
                self.source
            )));
        }
        let projected = self.proj.forward(map)?;
        let resized = self.resample.apply(&projected)?;
        spatial_into_layout(&resized, &self.target)
    }

    pub fn forward(&self, feature: &StageFeature) -> Result<StageFeature> {
        let out = self.forward_spatial(&feature.to_spatial()?)?;
        Ok(StageFeature::new(
            out,
            self.target.layout(),
            feature.stage_index,
        ))
    }
}

/// Dtype-matched identity for tests and for configuring aligners by hand.
pub fn identity_1x1(channels: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::eye(channels, dtype, &candle_core::Device::Cpu)?.reshape((channels, channels, 1, 1))?)
}
