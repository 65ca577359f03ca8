//! Training sessions: PAT, vanilla KD, FitNet and from-scratch training.
//!
//! A PAT step runs the clean teacher, the AFP-adapted teacher, the student
//! and RAA, combines `ce + α·kl + β·fd + γ·reg`, takes one optimizer step on
//! the student and the extra modules, and finally stores this step's clean
//! teacher and raw student features as the next step's feedback source.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::afp::{teacher_forward_adapted, Afp, AfpConfig, FeedbackBuffer};
use crate::align::StageAligner;
use crate::backbones::StagedBackbone;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::feature::{StageFeature, StageShape};
use crate::losses::{
    cross_entropy, feature_distill, feature_mse, kl_distill, reg_loss, total_loss, HclConfig,
    LossTerms, LossValues, LossWeights,
};
use crate::optim::{OptimConfig, Optimizer};
use crate::params::ParamStore;
use crate::raa::{Raa, RaaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Pat,
    Kd,
    Fitnet,
    Scratch,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pat, Method::Kd, Method::Fitnet, Method::Scratch];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pat => "pat",
            Method::Kd => "kd",
            Method::Fitnet => "fitnet",
            Method::Scratch => "scratch",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Method::Scratch
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub method: Method,
    pub weights: LossWeights,
    pub hcl: HclConfig,
    pub raa: RaaConfig,
    pub afp: AfpConfig,
    /// PAT only. Without RAA the student stages go through plain per-stage
    /// projectors instead.
    pub use_raa: bool,
    /// PAT only.
    pub use_afp: bool,
    pub optim: OptimConfig,
    /// Length of the learning-rate schedule.
    pub total_steps: u64,
    /// Seed of the extra modules (RAA, AFP, projectors).
    pub seed: u64,
    pub dtype: DType,
}

impl DistillConfig {
    pub fn new(method: Method, optim: OptimConfig) -> Self {
        Self {
            method,
            weights: LossWeights::default(),
            hcl: HclConfig::default(),
            raa: RaaConfig::default(),
            afp: AfpConfig::default(),
            use_raa: true,
            use_afp: true,
            optim,
            total_steps: 0,
            seed: 0,
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.hcl.validate()?;
        self.optim.validate()?;
        if self.method == Method::Pat {
            if !self.use_raa && !self.use_afp {
                return Err(Error::Usage(
                    "pat without RAA and AFP is the FitNet baseline; request --method fitnet".into(),
                ));
            }
            if self.use_raa {
                self.raa.validate()?;
            }
            if self.use_afp {
                self.afp.validate()?;
            }
        }
        Ok(())
    }

    fn pat_raa(&self) -> bool {
        self.method == Method::Pat && self.use_raa
    }

    fn pat_afp(&self) -> bool {
        self.method == Method::Pat && self.use_afp
    }

    fn uses_projectors(&self) -> bool {
        self.method == Method::Fitnet || (self.method == Method::Pat && !self.use_raa)
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    pub split: String,
    pub method: String,
    pub ce: f64,
    pub kl: f64,
    pub fd: f64,
    pub reg: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub accuracy: Option<f64>,
    pub seconds: f64,
    pub extra_params: usize,
}

/// Absolute tolerance of the loss-composition audit.
pub const AUDIT_TOLERANCE: f64 = 1e-6;

impl MetricRecord {
    pub fn losses(&self) -> LossValues {
        LossValues {
            ce: self.ce,
            kl: self.kl,
            fd: self.fd,
            reg: self.reg,
            total: self.total,
        }
    }

    /// Checks that `total` is the weighted sum of the recorded components.
    pub fn audit(&self) -> Result<()> {
        let w = LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            ..Default::default()
        };
        let recombined = self.losses().combine(&w);
        if (self.total - recombined).abs() > AUDIT_TOLERANCE {
            return Err(Error::Contract(format!(
                "step {}: total {} differs from recombined {}",
                self.step, self.total, recombined
            )));
        }
        Ok(())
    }

    /// Equality ignoring wall-clock time.
    pub fn same_run_values(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.seconds = other.seconds;
        a == *other
    }
}

/// Forward results of one step before the optimizer runs.
pub struct StepForward {
    pub loss: Tensor,
    pub values: LossValues,
    pub student_logits: Tensor,
    pub clean_teacher: Vec<StageFeature>,
    pub student: Vec<StageFeature>,
    pub feedback: Vec<(usize, Tensor)>,
    pub attention: Option<Tensor>,
}

pub struct DistillSession {
    config: DistillConfig,
    teacher: Option<StagedBackbone>,
    student: StagedBackbone,
    extras: ParamStore,
    raa: Option<Raa>,
    projectors: Vec<StageAligner>,
    afp: Option<Afp>,
    buffer: FeedbackBuffer,
    optimizer: Optimizer,
    step: u64,
    epoch: u64,
    last_feedback: Vec<(usize, Tensor)>,
    last_attention: Option<Tensor>,
}

impl DistillSession {
    /// `teacher` must be frozen (see [`StagedBackbone::frozen_copy`]) and is
    /// required for every method except `scratch`.
    pub fn new(
        config: DistillConfig,
        teacher: Option<StagedBackbone>,
        student: StagedBackbone,
    ) -> Result<Self> {
        Self::with_extras(config, teacher, student, None)
    }

    /// Like [`DistillSession::new`], with extra-module parameters and buffer
    /// contents restored from a checkpoint.
    pub fn with_extras(
        config: DistillConfig,
        teacher: Option<StagedBackbone>,
        student: StagedBackbone,
        restore: Option<(std::collections::HashMap<String, Tensor>, FeedbackBuffer)>,
    ) -> Result<Self> {
        config.validate()?;
        if config.method.needs_teacher() {
            match &teacher {
                None => {
                    return Err(Error::Usage(format!(
                        "method {} needs a teacher",
                        config.method
                    )))
                }
                Some(t) if !t.store().is_frozen() => {
                    return Err(Error::Usage("the teacher must be frozen".into()))
                }
                Some(t) if t.input_size() != student.input_size() => {
                    return Err(Error::config(
                        "input_size",
                        format!(
                            "teacher expects {} px, student {} px",
                            t.input_size(),
                            student.input_size()
                        ),
                    ))
                }
                Some(t) if t.num_classes() != student.num_classes() => {
                    return Err(Error::config("num_classes", "teacher and student disagree"))
                }
                _ => {}
            }
        }
        let dtype = student.dtype();
        let (mut extras, buffer) = match restore {
            Some((tensors, buffer)) => (ParamStore::from_tensors(tensors, dtype), buffer),
            None => (ParamStore::new(config.seed, dtype), FeedbackBuffer::new()),
        };
        let s_shapes = student.stage_shapes();
        let mut raa = None;
        let mut projectors = Vec::new();
        let mut afp = None;
        if let Some(t) = &teacher {
            let t_shapes = t.stage_shapes();
            if config.pat_raa() {
                raa = Some(Raa::new(&mut extras, "raa", &config.raa, &s_shapes, &t_shapes)?);
            }
            if config.uses_projectors() {
                projectors = build_projectors(&mut extras, &s_shapes, &t_shapes)?;
            }
            if config.pat_afp() {
                afp = Some(Afp::new(&mut extras, "afp", &config.afp, &t_shapes, &s_shapes)?);
            }
        }
        let mut vars = student.store().trainable_vars();
        vars.extend(extras.trainable_vars());
        let optimizer = Optimizer::new(&config.optim, vars)?;
        Ok(Self {
            config,
            teacher,
            student,
            extras,
            raa,
            projectors,
            afp,
            buffer,
            optimizer,
            step: 0,
            epoch: 0,
            last_feedback: Vec::new(),
            last_attention: None,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    pub fn teacher(&self) -> Option<&StagedBackbone> {
        self.teacher.as_ref()
    }

    pub fn student(&self) -> &StagedBackbone {
        &self.student
    }

    pub fn extras(&self) -> &ParamStore {
        &self.extras
    }

    pub fn raa(&self) -> Option<&Raa> {
        self.raa.as_ref()
    }

    pub fn afp(&self) -> Option<&Afp> {
        self.afp.as_ref()
    }

    pub fn buffer(&self) -> &FeedbackBuffer {
        &self.buffer
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Feedback tensors used by the most recent PAT step.
    pub fn last_feedback(&self) -> &[(usize, Tensor)] {
        &self.last_feedback
    }

    /// RAA attention of the most recent PAT step, `(B, N_q, N_q)`.
    pub fn last_attention(&self) -> Option<&Tensor> {
        self.last_attention.as_ref()
    }

    /// Parameters of RAA, AFP and any projectors; backbones excluded.
    pub fn count_extra_parameters(&self) -> usize {
        self.extras.num_parameters()
    }

    /// Closed-form extra-parameter count for a configuration and binding.
    pub fn expected_extra_parameters(
        config: &DistillConfig,
        teacher_shapes: &[StageShape],
        student_shapes: &[StageShape],
    ) -> usize {
        let mut n = 0;
        if config.pat_raa() {
            n += Raa::parameter_count(&config.raa, student_shapes, teacher_shapes);
        }
        if config.uses_projectors() {
            n += student_shapes
                .iter()
                .zip(teacher_shapes)
                .map(|(s, t)| StageAligner::parameter_count(s, t))
                .sum::<usize>();
        }
        if config.pat_afp() {
            n += Afp::parameter_count(&config.afp, teacher_shapes, student_shapes);
        }
        n
    }

    fn require_teacher(&self) -> Result<&StagedBackbone> {
        self.teacher
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("method {} needs a teacher", self.config.method)))
    }

    /// Runs the forward half of a step for the configured method, without
    /// touching parameters or the buffer.
    pub fn forward(&self, batch: &Tensor, labels: &Tensor) -> Result<StepForward> {
        let x = batch.to_dtype(self.student.dtype())?;
        let w = &self.config.weights;
        let (student, s_logits) = self.student.forward_stages(&x)?;
        let ce = cross_entropy(&s_logits, labels)?;
        let mut terms = LossTerms {
            ce: Some(ce),
            ..Default::default()
        };
        let mut clean_teacher = Vec::new();
        let mut feedback = Vec::new();
        let mut attention = None;
        if self.config.method != Method::Scratch {
            let teacher = self.require_teacher()?;
            let (clean, t_logits) = teacher.forward_stages(&x)?;
            let clean: Vec<StageFeature> = clean.iter().map(StageFeature::detach).collect();
            let t_logits = t_logits.detach();
            terms.kl = Some(kl_distill(&t_logits, &s_logits, w.tau_kd)?);
            match self.config.method {
                Method::Fitnet => {
                    let projected = self.project(&student)?;
                    terms.fd = Some(feature_mse(&clean, &projected)?);
                }
                Method::Pat => {
                    let target = match &self.afp {
                        Some(afp) => {
                            let pass = teacher_forward_adapted(teacher, &x, afp, &self.buffer)?;
                            terms.reg = Some(reg_loss(&t_logits, &pass.logits, w.tau_reg)?);
                            feedback = pass.feedback;
                            pass.stages
                        }
                        None => clean.clone(),
                    };
                    let aligned = match &self.raa {
                        Some(raa) => {
                            let out = raa.forward(&student)?;
                            attention = Some(out.attention.detach());
                            out.aligned
                        }
                        None => self.project(&student)?,
                    };
                    terms.fd = Some(feature_distill(&target, &aligned, &self.config.hcl)?);
                }
                _ => {}
            }
            clean_teacher = clean;
        }
        let (loss, values) = total_loss(&terms, w)?;
        Ok(StepForward {
            loss,
            values,
            student_logits: s_logits,
            clean_teacher,
            student,
            feedback,
            attention,
        })
    }

    fn project(&self, student: &[StageFeature]) -> Result<Vec<StageFeature>> {
        student
            .iter()
            .zip(&self.projectors)
            .map(|(f, p)| p.forward(f))
            .collect()
    }

    fn apply(&mut self, fwd: StepForward, labels: &Tensor, started: Instant) -> Result<MetricRecord> {
        let lr = self.config.optim.lr_at(self.step, self.config.total_steps);
        self.optimizer.set_lr(lr);
        let grads = fwd.loss.backward()?;
        self.optimizer.step(&grads)?;
        if self.afp.as_ref().is_some_and(|a| a.config().use_feedback) {
            self.buffer.update(&fwd.clean_teacher, &fwd.student)?;
        }
        self.step += 1;
        self.last_feedback = fwd.feedback;
        self.last_attention = fwd.attention;
        let (correct, n) = count_correct(&fwd.student_logits, labels)?;
        let w = &self.config.weights;
        Ok(MetricRecord {
            step: self.step,
            epoch: self.epoch,
            split: "train".into(),
            method: self.config.method.name().into(),
            ce: fwd.values.ce,
            kl: fwd.values.kl,
            fd: fwd.values.fd,
            reg: fwd.values.reg,
            total: fwd.values.total,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            accuracy: Some(correct as f64 / n as f64),
            seconds: started.elapsed().as_secs_f64(),
            extra_params: self.count_extra_parameters(),
        })
    }

    /// One optimizer step of the configured method.
    pub fn train_step(&mut self, batch: &Tensor, labels: &Tensor) -> Result<MetricRecord> {
        let started = Instant::now();
        let fwd = self.forward(batch, labels)?;
        self.apply(fwd, labels, started)
    }

    fn step_as(&mut self, method: Method, batch: &Tensor, labels: &Tensor) -> Result<MetricRecord> {
        if self.config.method != method {
            return Err(Error::Usage(format!(
                "session is configured for {}, not {method}",
                self.config.method
            )));
        }
        self.train_step(batch, labels)
    }

    /// `ce + α·kl`.
    pub fn kd_baseline_step(&mut self, batch: &Tensor, labels: &Tensor) -> Result<MetricRecord> {
        self.step_as(Method::Kd, batch, labels)
    }

    /// `ce + α·kl + β·Σ mse(F^T_i, P_i(F^S_i))`.
    pub fn fitnet_baseline_step(&mut self, batch: &Tensor, labels: &Tensor) -> Result<MetricRecord> {
        self.step_as(Method::Fitnet, batch, labels)
    }

    /// Student, extra-module and buffer tensors under `student.`, their own
    /// `raa.` / `afp.` / `proj.` names, and `buffer.`.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, t) in self.student.store().to_tensors() {
            out.insert(format!("student.{n}"), t);
        }
        out.extend(self.extras.to_tensors());
        out.extend(self.buffer.tensors());
        out
    }
}

fn build_projectors(
    store: &mut ParamStore,
    student: &[StageShape],
    teacher: &[StageShape],
) -> Result<Vec<StageAligner>> {
    student
        .iter()
        .zip(teacher)
        .enumerate()
        .map(|(i, (s, t))| StageAligner::new(store, &format!("proj.stage{}", i + 1), *s, *t))
        .collect()
}

/// Number of rows whose arg-max equals the label, and the row count.
pub fn count_correct(logits: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
    let labels = labels.to_dtype(DType::U32)?.to_vec1::<u32>()?;
    let correct = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok((correct, labels.len()))
}

/// Top-1 accuracy of `model` over `dataset`, evaluated in order.
pub fn evaluate(model: &StagedBackbone, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    for idx in dataset.batches(batch_size, None) {
        let (x, y) = dataset.batch(&idx, model.dtype(), None)?;
        let logits = model.logits(&x)?;
        correct += count_correct(&logits, &y)?.0;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("dkd".parse::<Method>(), Err(Error::Config { .. })));
    }

    #[test]
    fn pat_without_modules_is_rejected() {
        let mut c = DistillConfig::new(Method::Pat, OptimConfig::sgd());
        c.use_raa = false;
        c.use_afp = false;
        assert!(matches!(c.validate(), Err(Error::Usage(_))));
        c.method = Method::Fitnet;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn count_correct_tally() {
        let logits = Tensor::new(&[[0.1f32, 0.9], [0.8, 0.2], [0.3, 0.7]], &Device::Cpu).unwrap();
        let labels = Tensor::new(&[1u32, 1, 1], &Device::Cpu).unwrap();
        assert_eq!(count_correct(&logits, &labels).unwrap(), (2, 3));
    }

    #[test]
    fn audit_catches_mismatch() {
        let mut r = MetricRecord {
            step: 1,
            epoch: 0,
            split: "train".into(),
            method: "pat".into(),
            ce: 1.0,
            kl: 2.0,
            fd: 3.0,
            reg: 4.0,
            total: 3.15,
            alpha: 0.5,
            beta: 0.25,
            gamma: 0.1,
            accuracy: None,
            seconds: 0.0,
            extra_params: 0,
        };
        assert!(r.audit().is_ok());
        r.total += 1e-5;
        assert!(r.audit().is_err());
    }
}
