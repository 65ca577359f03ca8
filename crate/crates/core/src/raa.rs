//! Region-aware attention over the student's stage features.
//!
//! Each of the four student stages is pooled onto a `g × g` patch grid and
//! projected to `d` channels, giving `N_q / 4 = g²` tokens per stage. The
//! four token sets are concatenated in stage order and passed through one
//! bare single-head self-attention:
//!
//! ```text
//! F' = softmax((F W_qᵀ)(F W_kᵀ)ᵀ / √d) · F W_vᵀ
//! ```
//!
//! The blended sequence is then cut back into its four stage slices and each
//! slice is mapped onto the teacher's stage shape by two learned linear maps,
//! one over the token axis and one over channels, so that stage-wise feature
//! matching can be applied unchanged.

use std::ops::Range;

use candle_core::{Module, Tensor, D};
use candle_nn::Conv2d;

use crate::error::{Error, Result};
use crate::feature::{square_side, StageFeature, StageShape};
use crate::nn::{bilinear_weights, conv2d, linear, matmul, padded, Linear, Resample2d, ResampleKind};
use crate::params::{Init, ParamStore};

pub const DEFAULT_NQ: usize = 64;
pub const DEFAULT_D: usize = 128;
/// Query counts of the N_q sweep.
pub const NQ_SWEEP: [usize; 4] = [36, 64, 80, 144];

#[derive(Debug, Clone, PartialEq)]
pub struct RaaConfig {
    /// Total query count across the four stages.
    pub n_q: usize,
    /// Token width.
    pub d: usize,
    /// Whether a patch grid finer than a stage's own resolution is allowed
    /// (pooling windows then overlap and replicate cells). When false such a
    /// stage is rejected with a resolution error.
    pub allow_grid_upsampling: bool,
}

impl Default for RaaConfig {
    fn default() -> Self {
        Self {
            n_q: DEFAULT_NQ,
            d: DEFAULT_D,
            allow_grid_upsampling: true,
        }
    }
}

impl RaaConfig {
    pub fn new(n_q: usize, d: usize) -> Self {
        Self {
            n_q,
            d,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.n_q % 4 != 0 {
            return Err(Error::config(
                "raa.n_q",
                format!("{} is not a positive multiple of 4", self.n_q),
            ));
        }
        if square_side(self.n_q / 4).is_none() {
            return Err(Error::config(
                "raa.n_q",
                format!("n_q/4 = {} is not a perfect square", self.n_q / 4),
            ));
        }
        if self.d == 0 {
            return Err(Error::config("raa.d", "must be positive"));
        }
        Ok(())
    }

    pub fn tokens_per_stage(&self) -> usize {
        self.n_q / 4
    }

    /// Side of the per-stage patch grid.
    pub fn grid_side(&self) -> usize {
        square_side(self.n_q / 4).unwrap_or(0)
    }

    /// The token shape of one stage slice, viewed on its grid.
    pub fn slice_shape(&self) -> StageShape {
        StageShape::Tokens {
            tokens: self.tokens_per_stage(),
            dim: self.d,
        }
    }
}

/// `C_i`: pool a stage onto the patch grid, then project to `d` channels.
#[derive(Debug, Clone)]
pub struct Patchifier {
    pool: Resample2d,
    proj: Conv2d,
    stage: usize,
}

impl Patchifier {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        stage: usize,
        source: StageShape,
        config: &RaaConfig,
    ) -> Result<Self> {
        let g = config.grid_side();
        let (h, w) = source.grid()?;
        if (g > h || g > w) && !config.allow_grid_upsampling {
            return Err(Error::Resolution {
                stage,
                msg: format!("patch grid {g}×{g} exceeds the stage resolution {h}×{w}"),
            });
        }
        Ok(Self {
            pool: Resample2d::new(ResampleKind::AdaptiveAvg, (h, w), (g, g), store.dtype())?,
            proj: conv2d(
                store,
                &format!("{name}.proj"),
                source.channels(),
                config.d,
                1,
                padded(0, 1),
            )?,
            stage,
        })
    }

    pub fn parameter_count(source: &StageShape, d: usize) -> usize {
        source.channels() * d + d
    }
}

/// Pools `stage` onto the patch grid and projects it: `(B, g², d)`.
pub fn patchify_and_project(stage: &StageFeature, projector: &Patchifier) -> Result<Tensor> {
    let map = stage.to_spatial()?;
    let (_, _, h, w) = map.dims4()?;
    if (h, w) != projector.pool.from {
        return Err(Error::Resolution {
            stage: projector.stage,
            msg: format!(
                "projector built for a {:?} grid, got {h}×{w}",
                projector.pool.from
            ),
        });
    }
    let pooled = projector.pool.apply(&map)?;
    let projected = projector.proj.forward(&pooled)?;
    let (b, d, g, _) = projected.dims4()?;
    Ok(projected.reshape((b, d, g * g))?.transpose(1, 2)?.contiguous()?)
}

/// Single-head self-attention without bias, positional encoding,
/// normalization or residual path.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let mut w = |n: &str| store.get(&format!("{name}.{n}"), &[d, d], Init::fan_in(d));
        Ok(Self {
            w_q: w("w_q")?,
            w_k: w("w_k")?,
            w_v: w("w_v")?,
        })
    }

    pub fn parameter_count(d: usize) -> usize {
        3 * d * d
    }

    /// Returns the attended tokens `(B, N, d)` and the attention matrix
    /// `(B, N, N)`.
    pub fn forward(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, d) = tokens.dims3()?;
        let q = matmul(tokens, &self.w_q.t()?)?;
        let k = matmul(tokens, &self.w_k.t()?)?;
        let v = matmul(tokens, &self.w_v.t()?)?;
        let scores = (matmul(&q, &k.t()?)? / (d as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = matmul(&attn, &v)?;
        Ok((out, attn))
    }
}

/// Maps one `(B, g², d)` stage slice onto a teacher stage shape: a learned
/// `g² → N_t` map over tokens (started at bilinear interpolation of the
/// patch grid) followed by a `d → C_t` projection with bias.
#[derive(Debug, Clone)]
pub struct SliceAligner {
    interp: Tensor,
    proj: Linear,
    tokens: usize,
    target: StageShape,
}

impl SliceAligner {
    pub fn new(store: &mut ParamStore, name: &str, grid: usize, d: usize, target: StageShape) -> Result<Self> {
        let (th, tw) = target.grid()?;
        let (rows, cols) = (bilinear_weights(grid, th), bilinear_weights(grid, tw));
        let mut init = vec![0.0; th * tw * grid * grid];
        for r in 0..th {
            for c in 0..tw {
                for i in 0..grid {
                    for j in 0..grid {
                        init[(r * tw + c) * grid * grid + i * grid + j] = rows[r * grid + i] * cols[c * grid + j];
                    }
                }
            }
        }
        let interp = store.get(&format!("{name}.interp"), &[th * tw, grid * grid], Init::Values(init))?;
        let proj = linear(store, &format!("{name}.proj"), d, target.channels(), true)?;
        Ok(Self {
            interp,
            proj,
            tokens: grid * grid,
            target,
        })
    }

    pub fn parameter_count(grid: usize, d: usize, target: &StageShape) -> usize {
        let c = target.channels();
        target.numel() / c * grid * grid + d * c + c
    }

    pub fn target(&self) -> StageShape {
        self.target
    }

    pub fn forward(&self, slice: &Tensor) -> Result<Tensor> {
        let (b, n, _) = slice.dims3()?;
        if n != self.tokens {
            return Err(Error::Alignment(format!(
                "aligner expects {} tokens, got {n}",
                self.tokens
            )));
        }
        let y = self.proj.forward(&matmul(&self.interp, slice)?)?;
        match self.target {
            StageShape::Tokens { .. } => Ok(y),
            StageShape::Spatial { channels, height, width } => Ok(y
                .reshape((b, height, width, channels))?
                .permute((0, 3, 1, 2))?
                .contiguous()?),
        }
    }
}

/// The concatenated (and, after attention, blended) token sequence.
#[derive(Debug, Clone)]
pub struct BlendedTokens {
    pub tokens: Tensor,
    pub stage_slices: Vec<Range<usize>>,
}

/// Concatenates the four projected stages and applies self-attention.
pub fn blend(projected: &[Tensor], attention: &SelfAttention) -> Result<(BlendedTokens, Tensor)> {
    if projected.len() != 4 {
        return Err(Error::Assembly(format!(
            "expected 4 projected stages, got {}",
            projected.len()
        )));
    }
    let dims0 = projected[0].dims3()?;
    for (i, p) in projected.iter().enumerate() {
        if p.dims3()? != dims0 {
            return Err(Error::Assembly(format!(
                "stage {} tokens have shape {:?}, stage 1 has {:?}",
                i + 1,
                p.dims(),
                dims0
            )));
        }
    }
    let per = dims0.1;
    let concat = Tensor::cat(projected, 1)?;
    let (out, attn) = attention.forward(&concat)?;
    Ok((
        BlendedTokens {
            tokens: out,
            stage_slices: (0..4).map(|i| i * per..(i + 1) * per).collect(),
        },
        attn,
    ))
}

/// Cuts the blended tokens into stage slices and maps each onto its
/// teacher stage shape.
pub fn split_and_align(
    blended: &BlendedTokens,
    aligners: &[SliceAligner],
    teacher_shapes: &[StageShape],
) -> Result<Vec<StageFeature>> {
    if teacher_shapes.len() != 4 || blended.stage_slices.len() != 4 || aligners.len() != 4 {
        return Err(Error::Binding(format!(
            "need 4 stage slices, aligners and teacher shapes; got {}, {} and {}",
            blended.stage_slices.len(),
            aligners.len(),
            teacher_shapes.len()
        )));
    }
    let mut out = Vec::with_capacity(4);
    for (i, ((range, aligner), target)) in blended
        .stage_slices
        .iter()
        .zip(aligners)
        .zip(teacher_shapes)
        .enumerate()
    {
        if aligner.target() != *target {
            return Err(Error::Binding(format!(
                "aligner {} targets {}, teacher stage is {}",
                i + 1,
                aligner.target(),
                target
            )));
        }
        let slice = blended.tokens.narrow(1, range.start, range.len())?;
        let data = aligner.forward(&slice)?;
        out.push(StageFeature::new(data, target.layout(), i + 1));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RaaOutput {
    /// Student features in the teacher's stage shapes.
    pub aligned: Vec<StageFeature>,
    /// `(B, N_q, N_q)`, queries in stage-then-patch order.
    pub attention: Tensor,
    pub blended: BlendedTokens,
}

/// Parameters and fixed operators of one RAA instance, bound to a student
/// and a teacher.
#[derive(Debug, Clone)]
pub struct Raa {
    config: RaaConfig,
    patchifiers: Vec<Patchifier>,
    attention: SelfAttention,
    aligners: Vec<SliceAligner>,
    teacher_shapes: Vec<StageShape>,
}

impl Raa {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &RaaConfig,
        student_shapes: &[StageShape],
        teacher_shapes: &[StageShape],
    ) -> Result<Self> {
        config.validate()?;
        if student_shapes.len() != 4 || teacher_shapes.len() != 4 {
            return Err(Error::Binding("RAA needs four student and four teacher stages".into()));
        }
        let patchifiers = student_shapes
            .iter()
            .enumerate()
            .map(|(i, s)| Patchifier::new(store, &format!("{name}.patchify{}", i + 1), i + 1, *s, config))
            .collect::<Result<Vec<_>>>()?;
        let attention = SelfAttention::new(store, &format!("{name}.attn"), config.d)?;
        let g = config.grid_side();
        let aligners = teacher_shapes
            .iter()
            .enumerate()
            .map(|(i, t)| SliceAligner::new(store, &format!("{name}.align{}", i + 1), g, config.d, *t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            patchifiers,
            attention,
            aligners,
            teacher_shapes: teacher_shapes.to_vec(),
        })
    }

    /// Closed-form parameter count for the given binding.
    pub fn parameter_count(
        config: &RaaConfig,
        student_shapes: &[StageShape],
        teacher_shapes: &[StageShape],
    ) -> usize {
        let d = config.d;
        let g = config.grid_side();
        student_shapes
            .iter()
            .map(|s| Patchifier::parameter_count(s, d))
            .sum::<usize>()
            + SelfAttention::parameter_count(d)
            + teacher_shapes
                .iter()
                .map(|t| SliceAligner::parameter_count(g, d, t))
                .sum::<usize>()
    }

    pub fn config(&self) -> &RaaConfig {
        &self.config
    }

    pub fn attention(&self) -> &SelfAttention {
        &self.attention
    }

    pub fn aligners(&self) -> &[SliceAligner] {
        &self.aligners
    }

    pub fn teacher_shapes(&self) -> &[StageShape] {
        &self.teacher_shapes
    }

    pub fn forward(&self, student_stages: &[StageFeature]) -> Result<RaaOutput> {
        if student_stages.len() != 4 {
            return Err(Error::Assembly(format!(
                "RAA takes 4 student stages, got {}",
                student_stages.len()
            )));
        }
        let projected = student_stages
            .iter()
            .zip(&self.patchifiers)
            .map(|(s, p)| patchify_and_project(s, p))
            .collect::<Result<Vec<_>>>()?;
        let (blended, attention) = blend(&projected, &self.attention)?;
        let aligned = split_and_align(&blended, &self.aligners, &self.teacher_shapes)?;
        Ok(RaaOutput {
            aligned,
            attention,
            blended,
        })
    }
}

/// Convenience wrapper matching the functional signature
/// `(student stages, params, config, teacher shapes) → (aligned, attention)`.
pub fn raa_forward(
    student_stages: &[StageFeature],
    raa: &Raa,
    teacher_shapes: &[StageShape],
) -> Result<(Vec<StageFeature>, Tensor)> {
    if teacher_shapes != raa.teacher_shapes() {
        return Err(Error::Binding(
            "teacher shapes differ from the ones this RAA was bound to".into(),
        ));
    }
    let out = raa.forward(student_stages)?;
    Ok((out.aligned, out.attention))
}
