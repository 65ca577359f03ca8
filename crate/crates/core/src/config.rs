//! Experiment configuration in a flat `key = value` format with dotted
//! sections.
//!
//! ```text
//! # comment
//! method = pat
//! teacher.model = tiny_cnn
//! raa.n_q = 64
//! afp.stages = 1,2,3,4
//! ```
//!
//! Every key has a default. Unknown keys and unparsable values fail with
//! the offending key as the field path. The digest is a hash of the
//! canonical (sorted, fully expanded) rendering, so two configs that resolve
//! to the same values share a digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::afp::{AfpConfig, FeedbackMode};
use crate::backbones::{BackboneKind, BackboneSpec};
use crate::data::CifarVariant;
use crate::distiller::{DistillConfig, Method};
use crate::error::{Error, Result};
use crate::losses::{HclConfig, LossWeights};
use crate::optim::{OptimConfig, OptimizerKind, Schedule};
use crate::raa::RaaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar(CifarVariant),
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Cifar(CifarVariant::Cifar10) => "cifar10",
            DataSource::Cifar(CifarVariant::Cifar100) => "cifar100",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub teacher_model: BackboneKind,
    /// Teacher checkpoint; relative paths resolve against the config file.
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_model: BackboneKind,

    pub data_source: DataSource,
    /// Falls back to the `PAT_DATA_ROOT` environment variable.
    pub data_root: Option<PathBuf>,
    pub num_classes: usize,
    pub input_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub fraction: f64,
    pub augment: bool,

    pub weights: LossWeights,
    pub hcl: HclConfig,
    pub raa_enabled: bool,
    pub raa: RaaConfig,
    pub afp_enabled: bool,
    pub afp: AfpConfig,

    /// `None` picks by student family.
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub momentum: f64,
    pub schedule: Schedule,

    pub epochs: u64,
    pub batch_size: usize,
    /// 0 means no cap.
    pub max_steps_per_epoch: u64,
    pub seeds: Vec<u64>,
    pub dtype: DType,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Pat,
            teacher_model: BackboneKind::TinyCnn,
            teacher_checkpoint: None,
            student_model: BackboneKind::TinyVit,
            data_source: DataSource::Synthetic,
            data_root: None,
            num_classes: 10,
            input_size: 32,
            train_size: 2000,
            test_size: 500,
            noise: 0.5,
            data_seed: 1234,
            fraction: 1.0,
            augment: true,
            weights: LossWeights::default(),
            hcl: HclConfig::default(),
            raa_enabled: true,
            raa: RaaConfig::default(),
            afp_enabled: true,
            afp: AfpConfig::default(),
            optimizer: None,
            lr: None,
            weight_decay: None,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            epochs: 10,
            batch_size: 128,
            max_steps_per_epoch: 0,
            seeds: vec![0],
            dtype: DType::F32,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn auto<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".into(), T::to_string)
}

fn parse_auto<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

impl ExperimentConfig {
    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            if let Some(ckpt) = &cfg.teacher_checkpoint {
                if ckpt.is_relative() {
                    cfg.teacher_checkpoint = Some(dir.join(ckpt));
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one key. Used for both file lines and command-line overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "method" => self.method = v.parse()?,
            "teacher.model" => self.teacher_model = v.parse()?,
            "teacher.checkpoint" => {
                self.teacher_checkpoint = (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
            }
            "student.model" => self.student_model = v.parse()?,
            "data.source" => {
                self.data_source = match v {
                    "synthetic" => DataSource::Synthetic,
                    other => DataSource::Cifar(
                        other
                            .parse()
                            .map_err(|_| Error::config(key, format!("unknown source `{v}`")))?,
                    ),
                }
            }
            "data.root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.num_classes" => self.num_classes = parse_num(key, v)?,
            "data.input_size" => self.input_size = parse_num(key, v)?,
            "data.train_size" => self.train_size = parse_num(key, v)?,
            "data.test_size" => self.test_size = parse_num(key, v)?,
            "data.noise" => self.noise = parse_num(key, v)?,
            "data.seed" => self.data_seed = parse_num(key, v)?,
            "data.fraction" => self.fraction = parse_num(key, v)?,
            "data.augment" => self.augment = parse_bool(key, v)?,
            "loss.alpha" => self.weights.alpha = parse_num(key, v)?,
            "loss.beta" => self.weights.beta = parse_num(key, v)?,
            "loss.gamma" => self.weights.gamma = parse_num(key, v)?,
            "loss.tau_kd" => self.weights.tau_kd = parse_num(key, v)?,
            "loss.tau_reg" => self.weights.tau_reg = parse_num(key, v)?,
            "loss.hcl_levels" => self.hcl.levels = parse_list(key, v)?,
            "raa.enabled" => self.raa_enabled = parse_bool(key, v)?,
            "raa.n_q" => self.raa.n_q = parse_num(key, v)?,
            "raa.d" => self.raa.d = parse_num(key, v)?,
            "raa.allow_grid_upsampling" => self.raa.allow_grid_upsampling = parse_bool(key, v)?,
            "afp.enabled" => self.afp_enabled = parse_bool(key, v)?,
            "afp.stages" => self.afp.active_stages = parse_list(key, v)?,
            "afp.feedback" => self.afp.use_feedback = parse_bool(key, v)?,
            "afp.feedback_mode" => {
                self.afp.feedback_mode = match v {
                    "batch_mean" => FeedbackMode::BatchMean,
                    "per_slot" => FeedbackMode::PerSlot,
                    _ => return Err(Error::config(key, format!("unknown mode `{v}`"))),
                }
            }
            "optim.kind" => {
                self.optimizer = match v {
                    "auto" => None,
                    "sgd" => Some(OptimizerKind::Sgd),
                    "adamw" => Some(OptimizerKind::AdamW),
                    _ => return Err(Error::config(key, format!("unknown optimizer `{v}`"))),
                }
            }
            "optim.lr" => self.lr = parse_auto(key, v)?,
            "optim.weight_decay" => self.weight_decay = parse_auto(key, v)?,
            "optim.momentum" => self.momentum = parse_num(key, v)?,
            "optim.schedule" => {
                self.schedule = match v {
                    "cosine" => Schedule::Cosine,
                    "constant" => Schedule::Constant,
                    _ => return Err(Error::config(key, format!("unknown schedule `{v}`"))),
                }
            }
            "train.epochs" => self.epochs = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.max_steps_per_epoch" => self.max_steps_per_epoch = parse_num(key, v)?,
            "train.seeds" => self.seeds = parse_list(key, v)?,
            "train.dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::config(key, format!("unknown dtype `{v}`"))),
                }
            }
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted by key.
    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let optim = match self.optimizer {
            None => "auto",
            Some(OptimizerKind::Sgd) => "sgd",
            Some(OptimizerKind::AdamW) => "adamw",
        };
        BTreeMap::from([
            ("method", self.method.name().to_string()),
            ("teacher.model", self.teacher_model.name().to_string()),
            (
                "teacher.checkpoint",
                self.teacher_checkpoint
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string()),
            ),
            ("student.model", self.student_model.name().to_string()),
            ("data.source", self.data_source.name().to_string()),
            (
                "data.root",
                self.data_root
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
            ("data.num_classes", self.num_classes.to_string()),
            ("data.input_size", self.input_size.to_string()),
            ("data.train_size", self.train_size.to_string()),
            ("data.test_size", self.test_size.to_string()),
            ("data.noise", self.noise.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.fraction", self.fraction.to_string()),
            ("data.augment", self.augment.to_string()),
            ("loss.alpha", self.weights.alpha.to_string()),
            ("loss.beta", self.weights.beta.to_string()),
            ("loss.gamma", self.weights.gamma.to_string()),
            ("loss.tau_kd", self.weights.tau_kd.to_string()),
            ("loss.tau_reg", self.weights.tau_reg.to_string()),
            ("loss.hcl_levels", join(&self.hcl.levels)),
            ("raa.enabled", self.raa_enabled.to_string()),
            ("raa.n_q", self.raa.n_q.to_string()),
            ("raa.d", self.raa.d.to_string()),
            (
                "raa.allow_grid_upsampling",
                self.raa.allow_grid_upsampling.to_string(),
            ),
            ("afp.enabled", self.afp_enabled.to_string()),
            ("afp.stages", join(&self.afp.active_stages)),
            ("afp.feedback", self.afp.use_feedback.to_string()),
            (
                "afp.feedback_mode",
                match self.afp.feedback_mode {
                    FeedbackMode::BatchMean => "batch_mean",
                    FeedbackMode::PerSlot => "per_slot",
                }
                .to_string(),
            ),
            ("optim.kind", optim.to_string()),
            ("optim.lr", auto(&self.lr)),
            ("optim.weight_decay", auto(&self.weight_decay)),
            ("optim.momentum", self.momentum.to_string()),
            (
                "optim.schedule",
                match self.schedule {
                    Schedule::Cosine => "cosine",
                    Schedule::Constant => "constant",
                }
                .to_string(),
            ),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            (
                "train.max_steps_per_epoch",
                self.max_steps_per_epoch.to_string(),
            ),
            ("train.seeds", join(&self.seeds)),
            ("train.dtype", dtype_name(self.dtype).to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ])
    }

    /// Canonical rendering: one `key = value` line per key, sorted.
    pub fn to_text(&self) -> String {
        self.to_map()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`ExperimentConfig::to_text`].
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_text().as_bytes());
        hex::encode(hash)[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.hcl.validate()?;
        self.teacher_spec().architecture()?;
        self.student_spec().architecture()?;
        if let DataSource::Cifar(v) = self.data_source {
            if self.input_size != 32 {
                return Err(Error::config("data.input_size", "CIFAR images are 32×32"));
            }
            if self.num_classes != v.num_classes() {
                return Err(Error::config(
                    "data.num_classes",
                    format!("{} has {} classes", self.data_source.name(), v.num_classes()),
                ));
            }
        } else if self.train_size < self.num_classes || self.test_size == 0 {
            return Err(Error::config(
                "data.train_size",
                "synthetic splits need at least one sample per class",
            ));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("data.fraction", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("train.seeds", "need at least one seed"));
        }
        if self.method == Method::Pat {
            if !self.raa_enabled && !self.afp_enabled {
                return Err(Error::config(
                    "method",
                    "pat without RAA and AFP is the FitNet baseline; request method fitnet explicitly",
                ));
            }
            if self.raa_enabled {
                self.raa.validate()?;
            }
            if self.afp_enabled {
                self.afp.validate()?;
            }
        }
        if !self.afp.use_feedback && !(self.method == Method::Pat && self.afp_enabled) {
            return Err(Error::config(
                "afp.feedback",
                "disabling feedback needs AFP to be enabled",
            ));
        }
        self.optim_config().validate()
    }

    pub fn teacher_spec(&self) -> BackboneSpec {
        BackboneSpec::new(self.teacher_model, self.num_classes, self.input_size)
    }

    pub fn student_spec(&self) -> BackboneSpec {
        BackboneSpec::new(self.student_model, self.num_classes, self.input_size)
    }

    /// Optimizer settings for a model of the given kind, with overrides.
    pub fn optim_for(&self, model: BackboneKind) -> OptimConfig {
        let kind = self
            .optimizer
            .unwrap_or_else(|| OptimizerKind::for_family(model.family()));
        let base = match kind {
            OptimizerKind::Sgd => OptimConfig::sgd(),
            OptimizerKind::AdamW => OptimConfig::adamw(),
        };
        OptimConfig {
            lr: self.lr.unwrap_or(base.lr),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            momentum: self.momentum,
            schedule: self.schedule,
            ..base
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        self.optim_for(self.student_model)
    }

    pub fn distill_config(&self, seed: u64, total_steps: u64) -> DistillConfig {
        DistillConfig {
            method: self.method,
            weights: self.weights,
            hcl: self.hcl.clone(),
            raa: self.raa.clone(),
            afp: self.afp.clone(),
            use_raa: self.raa_enabled,
            use_afp: self.afp_enabled,
            optim: self.optim_config(),
            total_steps,
            seed: seed.wrapping_add(0x5EED),
            dtype: self.dtype,
        }
    }

    /// Short label for tables, e.g. `pat`, `pat-no_raa`, `pat-nq144`.
    pub fn label(&self) -> String {
        let mut parts = vec![self.method.name().to_string()];
        if self.method == Method::Pat {
            if !self.raa_enabled {
                parts.push("no_raa".into());
            }
            if !self.afp_enabled {
                parts.push("no_afp".into());
            } else {
                if !self.afp.use_feedback {
                    parts.push("no_feedback".into());
                }
                if self.afp.active_stages != [1, 2, 3, 4] {
                    parts.push(format!("afp{}", join(&self.afp.active_stages).replace(',', "")));
                }
            }
            if self.raa_enabled && self.raa.n_q != crate::raa::DEFAULT_NQ {
                parts.push(format!("nq{}", self.raa.n_q));
            }
        }
        if self.method != Method::Scratch && self.weights.alpha == 0.0 {
            parts.push("no_kl".into());
        }
        if self.fraction < 1.0 {
            parts.push(format!("frac{}", self.fraction));
        }
        parts.join("-")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let text = "# a run\nmethod = kd\nstudent.model = tiny_mixer\nraa.n_q = 144 # wide\nafp.stages = 2,3\ntrain.seeds = 0,1,2\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.method, Method::Kd);
        assert_eq!(c.student_model, BackboneKind::TinyMixer);
        assert_eq!(c.raa.n_q, 144);
        assert_eq!(c.afp.active_stages, vec![2, 3]);
        assert_eq!(c.seeds, vec![0, 1, 2]);
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.digest(), c.digest());
        assert_ne!(ExperimentConfig::default().digest(), c.digest());
    }

    #[test]
    fn errors_name_the_field() {
        let field = |text: &str| match ExperimentConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("raa.n_q = many"), "raa.n_q");
        assert_eq!(field("bogus.key = 1"), "bogus.key");
        assert_eq!(field("student.model = resnet"), "model");
        assert_eq!(field("just words"), "line 1");
    }

    #[test]
    fn validation_rules() {
        let field = |c: &ExperimentConfig| match c.validate() {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.raa_enabled = false;
        c.afp_enabled = false;
        assert_eq!(field(&c), "method");
        c.method = Method::Fitnet;
        assert!(c.validate().is_ok());
        c.afp.use_feedback = false;
        assert_eq!(field(&c), "afp.feedback");
        let mut c = ExperimentConfig::default();
        c.raa.n_q = 80;
        assert_eq!(field(&c), "raa.n_q");
        c.raa.n_q = 64;
        c.input_size = 20;
        assert_eq!(field(&c), "input_size");
    }

    #[test]
    fn optimizer_follows_student_family() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.optim_config().kind, OptimizerKind::AdamW);
        c.student_model = BackboneKind::TinyCnn;
        assert_eq!(c.optim_config().kind, OptimizerKind::Sgd);
        assert_eq!(c.optim_config().lr, 0.05);
        c.set("optim.lr", "0.2").unwrap();
        assert_eq!(c.optim_config().lr, 0.2);
    }

    #[test]
    fn labels() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.label(), "pat");
        c.raa_enabled = false;
        c.raa.n_q = 144;
        assert_eq!(c.label(), "pat-no_raa");
        c.raa_enabled = true;
        c.weights.alpha = 0.0;
        assert_eq!(c.label(), "pat-nq144-no_kl");
    }
}
