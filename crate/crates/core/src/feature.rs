//! Stage features, their shapes, and conversions between the spatial and
//! token layouts.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// `(batch, channels, height, width)`
    Spatial,
    /// `(batch, n_tokens, dim)`
    Tokens,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Spatial => "spatial",
            Layout::Tokens => "tokens",
        }
    }
}

/// Shape of one stage output with the batch dimension left out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageShape {
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    Tokens {
        tokens: usize,
        dim: usize,
    },
}

impl StageShape {
    pub fn layout(&self) -> Layout {
        match self {
            StageShape::Spatial { .. } => Layout::Spatial,
            StageShape::Tokens { .. } => Layout::Tokens,
        }
    }

    /// Full tensor dims for a batch of `batch` samples.
    pub fn dims(&self, batch: usize) -> Vec<usize> {
        match *self {
            StageShape::Spatial {
                channels,
                height,
                width,
            } => vec![batch, channels, height, width],
            StageShape::Tokens { tokens, dim } => vec![batch, tokens, dim],
        }
    }

    /// Channel count (spatial) or embedding width (tokens).
    pub fn channels(&self) -> usize {
        match *self {
            StageShape::Spatial { channels, .. } => channels,
            StageShape::Tokens { dim, .. } => dim,
        }
    }

    /// The 2-D grid this shape lives on. Token shapes use their square
    /// patch layout.
    pub fn grid(&self) -> Result<(usize, usize)> {
        match *self {
            StageShape::Spatial { height, width, .. } => Ok((height, width)),
            StageShape::Tokens { tokens, .. } => {
                let side = square_side(tokens).ok_or_else(|| {
                    Error::Input(format!("{tokens} tokens do not form a square grid"))
                })?;
                Ok((side, side))
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.dims(1).iter().product()
    }

    pub fn from_dims(dims: &[usize], layout: Layout) -> Result<Self> {
        match (layout, dims) {
            (Layout::Spatial, &[_, c, h, w]) => Ok(StageShape::Spatial {
                channels: c,
                height: h,
                width: w,
            }),
            (Layout::Tokens, &[_, n, d]) => Ok(StageShape::Tokens { tokens: n, dim: d }),
            _ => Err(Error::Input(format!(
                "dims {dims:?} do not match layout {layout:?}"
            ))),
        }
    }
}

impl std::fmt::Display for StageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageShape::Spatial {
                channels,
                height,
                width,
            } => write!(f, "(B,{channels},{height},{width})"),
            StageShape::Tokens { tokens, dim } => write!(f, "(B,{tokens},{dim})"),
        }
    }
}

pub(crate) fn square_side(n: usize) -> Option<usize> {
    let side = (n as f64).sqrt().round() as usize;
    (side * side == n).then_some(side)
}

/// One backbone stage's activation.
#[derive(Debug, Clone)]
pub struct StageFeature {
    pub data: Tensor,
    pub layout: Layout,
    /// 1-based stage number.
    pub stage_index: usize,
}

impl StageFeature {
    pub fn new(data: Tensor, layout: Layout, stage_index: usize) -> Self {
        Self {
            data,
            layout,
            stage_index,
        }
    }

    pub fn shape(&self) -> Result<StageShape> {
        StageShape::from_dims(self.data.dims(), self.layout)
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    /// The feature as a `(batch, channels, h, w)` map; tokens are laid back
    /// onto their square patch grid.
    pub fn to_spatial(&self) -> Result<Tensor> {
        match self.layout {
            Layout::Spatial => Ok(self.data.clone()),
            Layout::Tokens => tokens_to_spatial(&self.data),
        }
    }

    pub fn detach(&self) -> Self {
        Self {
            data: self.data.detach(),
            layout: self.layout,
            stage_index: self.stage_index,
        }
    }

    /// Rejects NaN or infinite entries.
    pub fn check_finite(&self) -> Result<()> {
        let bad = self
            .data
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?
            .into_iter()
            .any(|v| !v.is_finite());
        if bad {
            return Err(Error::Numeric {
                component: format!("stage{}", self.stage_index),
                value: f64::NAN,
            });
        }
        Ok(())
    }
}

/// `(B, N, D)` tokens → `(B, D, √N, √N)`.
pub fn tokens_to_spatial(tokens: &Tensor) -> Result<Tensor> {
    let (b, n, d) = tokens.dims3()?;
    let side = square_side(n)
        .ok_or_else(|| Error::Input(format!("{n} tokens do not form a square grid")))?;
    Ok(tokens.transpose(1, 2)?.reshape((b, d, side, side))?)
}

/// `(B, C, H, W)` → `(B, H·W, C)` in row-major grid order.
pub fn spatial_to_tokens(map: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = map.dims4()?;
    Ok(map.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Lays a spatial map out in `shape`'s layout. The grid and channels must
/// already agree.
pub fn spatial_into_layout(map: &Tensor, shape: &StageShape) -> Result<Tensor> {
    match shape {
        StageShape::Spatial { .. } => Ok(map.contiguous()?),
        StageShape::Tokens { .. } => spatial_to_tokens(map),
    }
}

/// Per-row class probabilities.
#[derive(Debug, Clone)]
pub struct ClassDistribution {
    pub probs: Tensor,
}

/// Temperature-scaled softmax over the class axis.
pub fn softmax_head(logits: &Tensor, temperature: f64) -> Result<ClassDistribution> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(
            "temperature",
            format!("must be a positive finite number, got {temperature}"),
        ));
    }
    let scaled = (logits / temperature)?;
    Ok(ClassDistribution {
        probs: candle_nn::ops::softmax(&scaled, D::Minus1)?,
    })
}
