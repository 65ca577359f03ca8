//! Adaptive feedback prompts: per-stage adapters that reshape the frozen
//! teacher's features using the student's previous-iteration error.
//!
//! For an active stage `i` the teacher's stage output `F_i` is replaced by
//!
//! ```text
//! feedback_i = M_i(F^S_prev,i) − F^T_prev,i          (batch-averaged)
//! F'_i       = PB_i(FB_i(concat(feedback_i, F_i)))
//! ```
//!
//! `FB_i` is a 1×1 reduction from `2C` to `C` channels, initialized to copy
//! the teacher half. `PB_i` is a residual branch whose last layer starts at
//! zero. Together they make a fresh adapter an exact identity, and the
//! adapted features propagate into the following teacher stages.

use std::collections::BTreeMap;

use candle_core::{Module, Tensor};
use candle_nn::Conv2d;

use crate::align::StageAligner;
use crate::backbones::StagedBackbone;
use crate::error::{Error, Result};
use crate::feature::{Layout, StageFeature, StageShape};
use crate::nn::{conv2d_with, gelu, padded, Linear, TokenConv};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackMode {
    /// Average the discrepancy over the previous batch and broadcast it.
    BatchMean,
    /// Subtract slot by slot, truncating or zero-padding to the current batch.
    PerSlot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfpConfig {
    /// 1-based stages that carry an adapter.
    pub active_stages: Vec<usize>,
    /// Without feedback an adapter is a bare prompt block on the teacher
    /// feature (no fusion block, no student projector).
    pub use_feedback: bool,
    pub feedback_mode: FeedbackMode,
}

impl Default for AfpConfig {
    fn default() -> Self {
        Self {
            active_stages: vec![1, 2, 3, 4],
            use_feedback: true,
            feedback_mode: FeedbackMode::BatchMean,
        }
    }
}

impl AfpConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 5];
        for &s in &self.active_stages {
            if !(1..=4).contains(&s) {
                return Err(Error::config("afp.stages", format!("stage {s} outside 1..=4")));
            }
            if seen[s] {
                return Err(Error::config("afp.stages", format!("stage {s} listed twice")));
            }
            seen[s] = true;
        }
        Ok(())
    }

    pub fn is_active(&self, stage: usize) -> bool {
        self.active_stages.contains(&stage)
    }
}

#[derive(Debug, Clone)]
enum Fusion {
    Spatial(Conv2d),
    /// `(B, N, 2D) → (B, N, D)`.
    Tokens(Linear),
}

#[derive(Debug, Clone)]
enum PromptBranch {
    Spatial(Conv2d, Conv2d),
    /// 1-D convolutions along the token axis.
    Tokens(TokenConv, TokenConv),
}

/// One stage's adapter.
#[derive(Debug, Clone)]
pub struct AfpStage {
    stage: usize,
    shape: StageShape,
    fusion: Option<Fusion>,
    prompt: PromptBranch,
    projector: Option<StageAligner>,
}

fn select_teacher_half(channels: usize) -> Vec<f64> {
    // row o picks input channel channels + o
    let mut w = vec![0.0; channels * 2 * channels];
    for o in 0..channels {
        w[o * 2 * channels + channels + o] = 1.0;
    }
    w
}

impl AfpStage {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        stage: usize,
        teacher: StageShape,
        student: StageShape,
        use_feedback: bool,
    ) -> Result<Self> {
        let c = teacher.channels();
        let fusion = if use_feedback {
            Some(match teacher.layout() {
                Layout::Spatial => Fusion::Spatial(conv2d_with(
                    store,
                    &format!("{name}.fusion"),
                    2 * c,
                    c,
                    1,
                    padded(0, 1),
                    Init::Values(select_teacher_half(c)),
                    Init::Zeros,
                )?),
                Layout::Tokens => {
                    let w = store.get(
                        &format!("{name}.fusion.weight"),
                        &[c, 2 * c],
                        Init::Values(select_teacher_half(c)),
                    )?;
                    let b = store.get(&format!("{name}.fusion.bias"), &[c], Init::Zeros)?;
                    Fusion::Tokens(Linear::new(w, Some(b)))
                }
            })
        } else {
            None
        };
        let prompt = match teacher.layout() {
            Layout::Spatial => PromptBranch::Spatial(
                conv2d_with(
                    store,
                    &format!("{name}.prompt.conv1"),
                    c,
                    c,
                    3,
                    padded(1, 1),
                    Init::fan_in(9 * c),
                    Init::fan_in(9 * c),
                )?,
                conv2d_with(
                    store,
                    &format!("{name}.prompt.conv2"),
                    c,
                    c,
                    3,
                    padded(1, 1),
                    Init::Zeros,
                    Init::Zeros,
                )?,
            ),
            Layout::Tokens => PromptBranch::Tokens(
                TokenConv::new(
                    store,
                    &format!("{name}.prompt.conv1"),
                    c,
                    c,
                    3,
                    Init::fan_in(3 * c),
                    Init::fan_in(3 * c),
                )?,
                TokenConv::new(
                    store,
                    &format!("{name}.prompt.conv2"),
                    c,
                    c,
                    3,
                    Init::Zeros,
                    Init::Zeros,
                )?,
            ),
        };
        let projector = if use_feedback {
            Some(StageAligner::new(
                store,
                &format!("{name}.student_proj"),
                student,
                teacher,
            )?)
        } else {
            None
        };
        Ok(Self {
            stage,
            shape: teacher,
            fusion,
            prompt,
            projector,
        })
    }

    /// Closed-form parameter count of one adapter.
    pub fn parameter_count(teacher: &StageShape, student: &StageShape, use_feedback: bool) -> usize {
        let c = teacher.channels();
        let k = match teacher.layout() {
            Layout::Spatial => 9,
            Layout::Tokens => 3,
        };
        let prompt = 2 * (k * c * c + c);
        if use_feedback {
            prompt + (2 * c * c + c) + StageAligner::parameter_count(student, teacher)
        } else {
            prompt
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn teacher_shape(&self) -> StageShape {
        self.shape
    }

    fn fuse(&self, feedback: &Tensor, teacher: &Tensor) -> Result<Tensor> {
        match &self.fusion {
            None => Ok(teacher.clone()),
            Some(Fusion::Spatial(conv)) => {
                let x = Tensor::cat(&[feedback, teacher], 1)?;
                Ok(conv.forward(&x)?)
            }
            Some(Fusion::Tokens(lin)) => {
                let x = Tensor::cat(&[feedback, teacher], 2)?;
                Ok(lin.forward(&x)?)
            }
        }
    }

    fn prompt(&self, x: &Tensor) -> Result<Tensor> {
        let branch = match &self.prompt {
            PromptBranch::Spatial(a, b) => b.forward(&gelu(&a.forward(x)?)?)?,
            PromptBranch::Tokens(a, b) => {
                let t = x.transpose(1, 2)?.contiguous()?;
                let h = b.forward(&gelu(&a.forward(&t)?)?)?;
                h.transpose(1, 2)?
            }
        };
        Ok((x + branch)?)
    }

    /// `F' = PB(FB(concat(feedback, F)))`.
    pub fn forward(&self, teacher_feature: &Tensor, feedback: &Tensor) -> Result<Tensor> {
        if teacher_feature.dims() != feedback.dims() {
            return Err(Error::Alignment(format!(
                "stage {}: feedback {:?} does not match teacher feature {:?}",
                self.stage,
                feedback.dims(),
                teacher_feature.dims()
            )));
        }
        let fused = self.fuse(feedback, teacher_feature)?;
        self.prompt(&fused)
    }
}

/// Previous-iteration teacher and raw student stage features, detached.
#[derive(Debug, Clone, Default)]
pub struct FeedbackBuffer {
    prev_teacher: BTreeMap<usize, Tensor>,
    prev_student: BTreeMap<usize, StageFeature>,
    initialized: bool,
}

impl FeedbackBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Replaces the buffer contents with detached copies of this step's
    /// clean teacher stages and raw student stages.
    pub fn update(&mut self, teacher: &[StageFeature], student: &[StageFeature]) -> Result<()> {
        if teacher.len() != 4 || student.len() != 4 {
            return Err(Error::Contract(format!(
                "buffer update needs 4 teacher and 4 student stages, got {} and {}",
                teacher.len(),
                student.len()
            )));
        }
        self.prev_teacher = teacher
            .iter()
            .map(|f| Ok((f.stage_index, f.data.detach().copy()?)))
            .collect::<Result<_>>()?;
        self.prev_student = student
            .iter()
            .map(|f| {
                let mut d = f.detach();
                d.data = d.data.copy()?;
                Ok((f.stage_index, d))
            })
            .collect::<Result<_>>()?;
        self.initialized = true;
        Ok(())
    }

    pub fn prev_teacher(&self, stage: usize) -> Option<&Tensor> {
        self.prev_teacher.get(&stage)
    }

    pub fn prev_student(&self, stage: usize) -> Option<&StageFeature> {
        self.prev_student.get(&stage)
    }

    /// Named contents for checkpointing.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (s, t) in &self.prev_teacher {
            out.push((format!("buffer.teacher{s}"), t.clone()));
        }
        for (s, f) in &self.prev_student {
            out.push((format!("buffer.student{s}"), f.data.clone()));
        }
        out
    }

    /// Restores a buffer written by [`FeedbackBuffer::tensors`].
    pub fn from_tensors(
        tensors: &std::collections::HashMap<String, Tensor>,
        student_layout: Layout,
    ) -> Self {
        let mut buf = Self::default();
        for s in 1..=4 {
            if let (Some(t), Some(f)) = (
                tensors.get(&format!("buffer.teacher{s}")),
                tensors.get(&format!("buffer.student{s}")),
            ) {
                buf.prev_teacher.insert(s, t.clone());
                buf.prev_student.insert(s, StageFeature::new(f.clone(), student_layout, s));
            }
        }
        buf.initialized = buf.prev_teacher.len() == 4;
        buf
    }
}

/// All adapters of one teacher.
#[derive(Debug, Clone)]
pub struct Afp {
    config: AfpConfig,
    stages: BTreeMap<usize, AfpStage>,
}

impl Afp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &AfpConfig,
        teacher_shapes: &[StageShape],
        student_shapes: &[StageShape],
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = BTreeMap::new();
        let mut active = config.active_stages.clone();
        active.sort_unstable();
        for s in active {
            stages.insert(
                s,
                AfpStage::new(
                    store,
                    &format!("{name}.stage{s}"),
                    s,
                    teacher_shapes[s - 1],
                    student_shapes[s - 1],
                    config.use_feedback,
                )?,
            );
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    /// No adapters at all; the adapted pass equals the plain pass.
    pub fn empty() -> Self {
        Self {
            config: AfpConfig {
                active_stages: Vec::new(),
                ..Default::default()
            },
            stages: BTreeMap::new(),
        }
    }

    pub fn parameter_count(
        config: &AfpConfig,
        teacher_shapes: &[StageShape],
        student_shapes: &[StageShape],
    ) -> usize {
        config
            .active_stages
            .iter()
            .map(|&s| {
                AfpStage::parameter_count(
                    &teacher_shapes[s - 1],
                    &student_shapes[s - 1],
                    config.use_feedback,
                )
            })
            .sum()
    }

    pub fn config(&self) -> &AfpConfig {
        &self.config
    }

    pub fn stage(&self, stage: usize) -> Option<&AfpStage> {
        self.stages.get(&stage)
    }

    fn active(&self, stage: usize) -> Result<&AfpStage> {
        self.stages
            .get(&stage)
            .ok_or_else(|| Error::Usage(format!("stage {stage} has no adapter")))
    }

    /// Feedback for `stage`, shaped like a teacher stage feature with batch
    /// size `batch`. Exact zeros while the buffer is empty or feedback is
    /// disabled. Gradients reach only the student projector.
    pub fn compute_feedback(
        &self,
        buffer: &FeedbackBuffer,
        stage: usize,
        batch: usize,
    ) -> Result<Tensor> {
        let adapter = self.active(stage)?;
        let dims = adapter.shape.dims(batch);
        let zeros = || -> Result<Tensor> {
            Ok(Tensor::zeros(dims.as_slice(), dtype_of(adapter), &candle_core::Device::Cpu)?)
        };
        let projector = match (&adapter.projector, buffer.is_initialized()) {
            (Some(p), true) => p,
            _ => return zeros(),
        };
        let (prev_s, prev_t) = match (buffer.prev_student(stage), buffer.prev_teacher(stage)) {
            (Some(s), Some(t)) => (s, t),
            _ => {
                return Err(Error::Contract(format!(
                    "buffer marked initialized but stage {stage} is missing"
                )))
            }
        };
        let diff = (projector.forward(prev_s)?.data - prev_t)?;
        match self.config.feedback_mode {
            FeedbackMode::BatchMean => Ok(diff.mean_keepdim(0)?.broadcast_as(dims.as_slice())?.contiguous()?),
            FeedbackMode::PerSlot => {
                let prev = diff.dims()[0];
                if prev >= batch {
                    Ok(diff.narrow(0, 0, batch)?)
                } else {
                    let mut pad_dims = dims.clone();
                    pad_dims[0] = batch - prev;
                    let pad = Tensor::zeros(pad_dims.as_slice(), diff.dtype(), diff.device())?;
                    Ok(Tensor::cat(&[&diff, &pad], 0)?)
                }
            }
        }
    }

    /// Applies the adapter of `stage` to a teacher feature.
    pub fn afp_stage(&self, teacher_feature: &Tensor, feedback: &Tensor, stage: usize) -> Result<Tensor> {
        self.active(stage)?.forward(teacher_feature, feedback)
    }
}

fn dtype_of(adapter: &AfpStage) -> candle_core::DType {
    match &adapter.prompt {
        PromptBranch::Spatial(a, _) => a.weight().dtype(),
        PromptBranch::Tokens(a, _) => a.weight().dtype(),
    }
}

/// Output of a teacher pass with adapters applied.
#[derive(Debug, Clone)]
pub struct AdaptedPass {
    /// Post-adapter features where a stage is active, raw outputs elsewhere.
    pub stages: Vec<StageFeature>,
    pub logits: Tensor,
    /// The feedback fed to each active stage, by stage number.
    pub feedback: Vec<(usize, Tensor)>,
}

/// Runs the teacher with each active adapter applied to its stage output.
/// Adapted features feed the next stage, and stage 4's feeds the head.
pub fn teacher_forward_adapted(
    teacher: &StagedBackbone,
    batch: &Tensor,
    afp: &Afp,
    buffer: &FeedbackBuffer,
) -> Result<AdaptedPass> {
    teacher.check_input(batch)?;
    let mut x = batch.to_dtype(teacher.dtype())?;
    let b = x.dims()[0];
    let mut stages = Vec::with_capacity(4);
    let mut feedbacks = Vec::new();
    for i in 1..=4 {
        x = teacher.forward_stage(i, &x)?;
        if afp.stage(i).is_some() {
            let feedback = afp.compute_feedback(buffer, i, b)?;
            x = afp.afp_stage(&x, &feedback, i)?;
            feedbacks.push((i, feedback));
        }
        stages.push(StageFeature::new(x.clone(), teacher.layout(), i));
    }
    let logits = teacher.head(&x)?;
    Ok(AdaptedPass {
        stages,
        logits,
        feedback: feedbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneKind, BackboneSpec};
    use candle_core::{DType, Device};

    fn teacher(kind: BackboneKind) -> StagedBackbone {
        let arch = BackboneSpec::new(kind, 10, 16).architecture().unwrap();
        StagedBackbone::with_store(kind.name(), arch, ParamStore::new(3, DType::F64).frozen()).unwrap()
    }

    fn input(b: usize) -> Tensor {
        Tensor::randn(0f64, 1.0, (b, 3, 16, 16), &Device::Cpu).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect()
    }

    fn setup(kind: BackboneKind, config: &AfpConfig) -> (StagedBackbone, Afp, ParamStore) {
        let t = teacher(kind);
        let s = teacher(BackboneKind::TinyCnn);
        let mut store = ParamStore::new(9, DType::F64);
        let afp = Afp::new(&mut store, "afp", config, &t.stage_shapes(), &s.stage_shapes()).unwrap();
        (t, afp, store)
    }

    #[test]
    fn fresh_adapters_are_exact_identity() {
        for kind in BackboneKind::ALL {
            let (t, afp, _) = setup(kind, &AfpConfig::default());
            let x = input(2);
            let (clean, clean_logits) = t.forward_stages(&x).unwrap();
            let adapted = teacher_forward_adapted(&t, &x, &afp, &FeedbackBuffer::new()).unwrap();
            for (c, a) in clean.iter().zip(&adapted.stages) {
                assert_eq!(bits(&c.data), bits(&a.data), "{kind} stage {}", c.stage_index);
            }
            assert_eq!(bits(&clean_logits), bits(&adapted.logits));
        }
    }

    #[test]
    fn feedback_is_zero_before_first_update() {
        let (_, afp, _) = setup(BackboneKind::TinyCnn, &AfpConfig::default());
        let fb = afp.compute_feedback(&FeedbackBuffer::new(), 2, 3).unwrap();
        assert_eq!(fb.dims(), &[3, 32, 4, 4]);
        assert_eq!(fb.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn feedback_is_projected_student_minus_teacher() {
        // student and teacher share a shape; make the projector an identity
        let (t, afp, store) = setup(BackboneKind::TinyCnn, &AfpConfig::default());
        let c = t.stage_shapes()[0].channels();
        store
            .set("afp.stage1.student_proj.proj.weight", &crate::align::identity_1x1(c, DType::F64).unwrap())
            .unwrap();
        store
            .set("afp.stage1.student_proj.proj.bias", &Tensor::zeros(c, DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let dims = t.stage_shapes()[0].dims(2);
        let ones = Tensor::ones(dims.as_slice(), DType::F64, &Device::Cpu).unwrap();
        let feats = |v: f64| -> Vec<StageFeature> {
            t.stage_shapes()
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let d = s.dims(2);
                    let base = if i == 0 { ones.clone() } else { Tensor::ones(d.as_slice(), DType::F64, &Device::Cpu).unwrap() };
                    StageFeature::new((base * v).unwrap(), Layout::Spatial, i + 1)
                })
                .collect()
        };
        let mut buf = FeedbackBuffer::new();
        buf.update(&feats(1.0), &feats(3.0)).unwrap();
        let fb = afp.compute_feedback(&buf, 1, 2).unwrap();
        for v in fb.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 2.0).abs() < 1e-12, "{v}");
        }
        buf.update(&feats(1.5), &feats(1.5)).unwrap();
        let fb = afp.compute_feedback(&buf, 1, 4).unwrap();
        assert_eq!(fb.dims()[0], 4);
        assert!(fb.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn per_slot_feedback_pads_and_truncates() {
        let cfg = AfpConfig { feedback_mode: FeedbackMode::PerSlot, ..Default::default() };
        let (t, afp, _) = setup(BackboneKind::TinyCnn, &cfg);
        let (tf, _) = t.forward_stages(&input(2)).unwrap();
        let mut buf = FeedbackBuffer::new();
        buf.update(&tf, &tf).unwrap();
        let fb = afp.compute_feedback(&buf, 3, 5).unwrap();
        assert_eq!(fb.dims()[0], 5);
        let tail = fb.narrow(0, 2, 3).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(tail.to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(afp.compute_feedback(&buf, 3, 1).unwrap().dims()[0], 1);
    }

    #[test]
    fn perturbed_adapter_changes_only_downstream() {
        let cfg = AfpConfig { active_stages: vec![2], ..Default::default() };
        let (t, afp, store) = setup(BackboneKind::TinyCnn, &cfg);
        let w = store.var("afp.stage2.prompt.conv2.weight").unwrap();
        store
            .set("afp.stage2.prompt.conv2.weight", &(w.ones_like().unwrap() * 0.05).unwrap())
            .unwrap();
        let x = input(2);
        let (clean, clean_logits) = t.forward_stages(&x).unwrap();
        let adapted = teacher_forward_adapted(&t, &x, &afp, &FeedbackBuffer::new()).unwrap();
        assert_eq!(bits(&clean[0].data), bits(&adapted.stages[0].data));
        for i in 1..4 {
            assert_ne!(bits(&clean[i].data), bits(&adapted.stages[i].data), "stage {}", i + 1);
        }
        assert_ne!(bits(&clean_logits), bits(&adapted.logits));
    }

    #[test]
    fn no_adapters_equals_plain_pass() {
        let t = teacher(BackboneKind::TinyVit);
        let x = input(1);
        let (_, logits) = t.forward_stages(&x).unwrap();
        let adapted = teacher_forward_adapted(&t, &x, &Afp::empty(), &FeedbackBuffer::new()).unwrap();
        assert_eq!(bits(&logits), bits(&adapted.logits));
    }

    #[test]
    fn usage_and_alignment_errors() {
        let cfg = AfpConfig { active_stages: vec![1, 3], ..Default::default() };
        let (_, afp, _) = setup(BackboneKind::TinyCnn, &cfg);
        assert!(matches!(afp.compute_feedback(&FeedbackBuffer::new(), 2, 1), Err(Error::Usage(_))));
        let f = Tensor::zeros((1, 16, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let g = Tensor::zeros((1, 16, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(afp.afp_stage(&f, &g, 1), Err(Error::Alignment(_))));
        assert!(matches!(afp.afp_stage(&f, &f, 2), Err(Error::Usage(_))));
        assert!(AfpConfig { active_stages: vec![5], ..Default::default() }.validate().is_err());
        assert!(AfpConfig { active_stages: vec![1, 1], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn buffer_holds_detached_copies() {
        let t = teacher(BackboneKind::TinyCnn);
        let (tf, _) = t.forward_stages(&input(2)).unwrap();
        let mut buf = FeedbackBuffer::new();
        assert!(matches!(buf.update(&tf[..3], &tf), Err(Error::Contract(_))));
        assert!(!buf.is_initialized());
        buf.update(&tf, &tf).unwrap();
        assert!(buf.is_initialized());
        assert_eq!(bits(buf.prev_teacher(4).unwrap()), bits(&tf[3].data));
        let map: std::collections::HashMap<_, _> = buf.tensors().into_iter().collect();
        assert_eq!(map.len(), 8);
        let back = FeedbackBuffer::from_tensors(&map, Layout::Spatial);
        assert!(back.is_initialized());
        assert_eq!(bits(&back.prev_student(2).unwrap().data), bits(&tf[1].data));
    }

    #[test]
    fn parameter_count_matches_store() {
        for use_feedback in [true, false] {
            for kind in BackboneKind::ALL {
                let cfg = AfpConfig { use_feedback, ..Default::default() };
                let (t, _, store) = setup(kind, &cfg);
                let s = teacher(BackboneKind::TinyCnn);
                let want = Afp::parameter_count(&cfg, &t.stage_shapes(), &s.stage_shapes());
                assert_eq!(store.num_parameters(), want, "{kind} feedback={use_feedback}");
            }
        }
    }
}
