//! End-to-end runs: teacher pretraining and (multi-seed) distillation, with
//! metrics, checkpoints and per-run summaries written to the output
//! directory.
//!
//! Layout of a distillation run directory:
//!
//! ```text
//! <out>/config.txt          canonical config, first line is the digest
//! <out>/aggregate.json      mean ± std of final accuracy over seeds
//! <out>/seed<k>/metrics.jsonl
//! <out>/seed<k>/summary.json
//! <out>/seed<k>/attention.csv   (PAT with RAA) batch-mean attention of the last step
//! <out>/seed<k>/session.safetensors
//! ```

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneKind, BackboneSpec, StagedBackbone};
use crate::checkpoint::{dtype_tag, Checkpoint, CheckpointMeta};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_cifar, subset_fraction, synth_dataset_with, Augment, Dataset, Split, SynthConfig};
use crate::distiller::{count_correct, DistillConfig, DistillSession, Method, MetricRecord};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, scalar};
use crate::metrics::MetricsSink;
use crate::params::ParamStore;

pub const DATA_ROOT_ENV: &str = "PAT_DATA_ROOT";
pub const TEACHER_FILE: &str = "teacher.safetensors";
pub const SESSION_FILE: &str = "session.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const ATTENTION_FILE: &str = "attention.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Data root from the config, else from `PAT_DATA_ROOT`.
pub fn data_root(cfg: &ExperimentConfig) -> Option<PathBuf> {
    cfg.data_root
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
}

/// Train and test splits, with the train split subsampled to
/// `data.fraction`.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.data_source {
        DataSource::Synthetic => {
            let all = synth_dataset_with(&SynthConfig {
                seed: cfg.data_seed,
                num_classes: cfg.num_classes,
                n: cfg.train_size + cfg.test_size,
                image_size: cfg.input_size,
                noise: cfg.noise,
            })?;
            let train_idx: Vec<usize> = (0..cfg.train_size).collect();
            let test_idx: Vec<usize> = (cfg.train_size..all.len()).collect();
            let mut test = all.select(&test_idx);
            test.split = Split::Test;
            (all.select(&train_idx), test)
        }
        DataSource::Cifar(variant) => {
            let root = data_root(cfg).ok_or_else(|| {
                Error::config(
                    "data.root",
                    format!("no data root given; set data.root or {DATA_ROOT_ENV}"),
                )
            })?;
            (
                load_cifar(&root, variant, Split::Train)?,
                load_cifar(&root, variant, Split::Test)?,
            )
        }
    };
    let train = if cfg.fraction < 1.0 {
        subset_fraction(&train, cfg.fraction, cfg.data_seed)?
    } else {
        train
    };
    Ok((train, test))
}

/// Top-1 accuracy and mean cross-entropy over a dataset.
pub fn evaluate_with_loss(model: &StagedBackbone, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    let mut ce_sum = 0.0;
    for idx in data.batches(batch_size, None) {
        let (x, y) = data.batch(&idx, model.dtype(), None)?;
        let logits = model.logits(&x)?;
        correct += count_correct(&logits, &y)?.0;
        ce_sum += scalar(&cross_entropy(&logits, &y)?)? * idx.len() as f64;
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, ce_sum / n))
}

fn steps_per_epoch(cfg: &ExperimentConfig, train: &Dataset) -> u64 {
    let full = train.len().div_ceil(cfg.batch_size) as u64;
    if cfg.max_steps_per_epoch > 0 {
        full.min(cfg.max_steps_per_epoch)
    } else {
        full
    }
}

fn eval_record(session: &DistillSession, accuracy: f64, ce: f64, seconds: f64) -> MetricRecord {
    let w = &session.config().weights;
    MetricRecord {
        step: session.step_count(),
        epoch: session.epoch(),
        split: "test".into(),
        method: session.config().method.name().into(),
        ce,
        kl: 0.0,
        fd: 0.0,
        reg: 0.0,
        total: ce,
        alpha: w.alpha,
        beta: w.beta,
        gamma: w.gamma,
        accuracy: Some(accuracy),
        seconds,
        extra_params: session.count_extra_parameters(),
    }
}

/// Trains `session` from `start_epoch` up to `cfg.epochs`, appending a
/// record per step and a test record per epoch. `after_epoch` runs after
/// each epoch's evaluation. Returns the last test accuracy.
pub fn run_epochs<F>(
    session: &mut DistillSession,
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    sink: &mut MetricsSink,
    start_epoch: u64,
    mut after_epoch: F,
) -> Result<f64>
where
    F: FnMut(&DistillSession) -> Result<()>,
{
    let dtype = session.student().dtype();
    let augment = if cfg.augment { Augment::default() } else { Augment::disabled() };
    let per_epoch = steps_per_epoch(cfg, train) as usize;
    let mut accuracy = 0.0;
    for epoch in start_epoch..cfg.epochs {
        session.set_epoch(epoch + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(epoch));
        for idx in train.batches(cfg.batch_size, Some((seed, epoch))).into_iter().take(per_epoch) {
            let (x, y) = train.batch(&idx, dtype, Some((&augment, &mut rng)))?;
            let record = session.train_step(&x, &y)?;
            log::debug!(
                "epoch {} step {} total {:.4} acc {:.3}",
                epoch + 1,
                record.step,
                record.total,
                record.accuracy.unwrap_or(0.0)
            );
            sink.append(&record)?;
        }
        let started = std::time::Instant::now();
        let (acc, ce) = evaluate_with_loss(session.student(), test, cfg.batch_size)?;
        accuracy = acc;
        sink.append(&eval_record(session, acc, ce, started.elapsed().as_secs_f64()))?;
        log::info!("epoch {}/{}: test accuracy {:.4}", epoch + 1, cfg.epochs, acc);
        after_epoch(session)?;
    }
    Ok(accuracy)
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = format!("# digest {}\n{}", cfg.digest(), cfg.to_text());
    std::fs::write(dir.join(CONFIG_FILE), text)?;
    Ok(())
}

fn backbone_meta(model: &StagedBackbone, seed: u64, epoch: u64, step: u64, digest: &str, kind: &str) -> CheckpointMeta {
    CheckpointMeta {
        model: model.name().to_string(),
        num_classes: model.num_classes(),
        input_size: model.input_size(),
        seed,
        epoch,
        step,
        config_digest: digest.to_string(),
        dtype: dtype_tag(model.dtype()).to_string(),
        kind: kind.to_string(),
    }
}

pub fn save_backbone(model: &StagedBackbone, path: &Path, seed: u64, epoch: u64, step: u64, digest: &str) -> Result<()> {
    Checkpoint {
        meta: backbone_meta(model, seed, epoch, step, digest, "backbone"),
        tensors: model.store().to_tensors(),
    }
    .save(path)
}

/// Loads a backbone checkpoint and checks it against `spec`.
pub fn load_backbone(path: &Path, spec: &BackboneSpec, dtype: DType, frozen: bool) -> Result<(StagedBackbone, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    if ck.meta.model != spec.kind.name()
        || ck.meta.num_classes != spec.num_classes
        || ck.meta.input_size != spec.input_size
    {
        return Err(Error::Checkpoint(format!(
            "{} holds {} ({} classes, {} px), expected {} ({} classes, {} px)",
            path.display(),
            ck.meta.model,
            ck.meta.num_classes,
            ck.meta.input_size,
            spec.kind.name(),
            spec.num_classes,
            spec.input_size
        )));
    }
    let tensors = if ck.meta.kind == "session" {
        ck.group("student.")
    } else {
        ck.tensors.clone().into_iter().collect()
    };
    let mut store = ParamStore::from_tensors(tensors, dtype);
    if frozen {
        store = store.frozen();
    }
    let model = StagedBackbone::with_store(spec.kind.name(), spec.architecture()?, store)?;
    Ok((model, ck.meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub accuracy: f64,
    pub epochs: u64,
    pub digest: String,
}

/// Trains the teacher with cross-entropy only. With `resume`, continues
/// from an existing checkpoint in the output directory, keeping its epoch
/// and step counters (optimizer moments restart).
pub fn pretrain_teacher(cfg: &ExperimentConfig, resume: bool) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let ckpt = out.join(TEACHER_FILE);
    let seed = cfg.seeds[0];
    let digest = cfg.digest();
    let (train, test) = load_datasets(cfg)?;
    let spec = cfg.teacher_spec();
    let (model, start_epoch, start_step) = if resume && ckpt.exists() {
        let (m, meta) = load_backbone(&ckpt, &spec, cfg.dtype, false)?;
        (m, meta.epoch, meta.step)
    } else {
        (StagedBackbone::build(&spec, seed, cfg.dtype)?, 0, 0)
    };
    write_config(cfg, out)?;
    let mut dc = DistillConfig::new(Method::Scratch, cfg.optim_for(cfg.teacher_model));
    dc.total_steps = cfg.epochs * steps_per_epoch(cfg, &train);
    dc.seed = seed;
    dc.dtype = cfg.dtype;
    let mut session = DistillSession::new(dc, None, model)?;
    session.set_step(start_step);
    session.set_epoch(start_epoch);
    let mut sink = MetricsSink::open(&out.join(METRICS_FILE), &digest)?;
    let accuracy = run_epochs(&mut session, cfg, seed, &train, &test, &mut sink, start_epoch, |s| {
        save_backbone(s.student(), &ckpt, seed, s.epoch(), s.step_count(), &digest)
    })?;
    let accuracy = if start_epoch >= cfg.epochs {
        evaluate_with_loss(session.student(), &test, cfg.batch_size)?.0
    } else {
        accuracy
    };
    Ok(PretrainOutcome {
        checkpoint: ckpt,
        accuracy,
        epochs: session.epoch().max(start_epoch),
        digest,
    })
}

/// Result of scoring a saved model on the configured test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub checkpoint: PathBuf,
    pub model: String,
    pub accuracy: f64,
    pub ce: f64,
    pub samples: usize,
    /// Digest of the config that produced the checkpoint.
    pub digest: String,
}

/// Evaluates a teacher or session checkpoint. The architecture comes from
/// the checkpoint metadata; data settings come from `cfg` and must agree
/// with it on class count and input size.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<EvalOutcome> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} does not exist", path.display())));
    }
    let meta = Checkpoint::load(path)?.meta;
    let kind: BackboneKind = meta.model.parse()?;
    let spec = BackboneSpec::new(kind, cfg.num_classes, cfg.input_size);
    let (model, meta) = load_backbone(path, &spec, cfg.dtype, true)?;
    let (_, test) = load_datasets(cfg)?;
    let (accuracy, ce) = evaluate_with_loss(&model, &test, cfg.batch_size)?;
    Ok(EvalOutcome {
        checkpoint: path.to_path_buf(),
        model: meta.model,
        accuracy,
        ce,
        samples: test.len(),
        digest: meta.config_digest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub method: String,
    pub teacher: String,
    pub student: String,
    pub seed: u64,
    pub final_accuracy: f64,
    pub extra_params: usize,
    pub n_q: Option<usize>,
    pub fraction: f64,
    pub epochs: u64,
    pub steps: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub method: String,
    pub teacher: String,
    pub student: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
    pub extra_params: usize,
    pub n_q: Option<usize>,
    pub digest: String,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Loads the frozen teacher named by the config.
pub fn load_teacher(cfg: &ExperimentConfig) -> Result<StagedBackbone> {
    let path = cfg
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("teacher.checkpoint", "a teacher checkpoint is required"))?;
    if !path.exists() {
        return Err(Error::config(
            "teacher.checkpoint",
            format!("{} does not exist", path.display()),
        ));
    }
    Ok(load_backbone(path, &cfg.teacher_spec(), cfg.dtype, true)?.0)
}

/// Runs the configured method once per seed and aggregates the results.
pub fn distill(cfg: &ExperimentConfig) -> Result<Aggregate> {
    cfg.validate()?;
    let teacher = if cfg.method.needs_teacher() {
        Some(load_teacher(cfg)?)
    } else {
        None
    };
    let (train, test) = load_datasets(cfg)?;
    let out = &cfg.output_dir;
    write_config(cfg, out)?;
    let digest = cfg.digest();
    let label = cfg.label();
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir)?;
        let summary = distill_seed(cfg, teacher.as_ref(), &train, &test, seed, &dir, &digest, &label)?;
        std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
        summaries.push(summary);
    }
    let accuracies: Vec<f64> = summaries.iter().map(|s| s.final_accuracy).collect();
    let (mean, std) = mean_std(&accuracies);
    let aggregate = Aggregate {
        label,
        method: cfg.method.name().into(),
        teacher: cfg.teacher_model.name().into(),
        student: cfg.student_model.name().into(),
        seeds: cfg.seeds.clone(),
        accuracies,
        mean,
        std,
        extra_params: summaries[0].extra_params,
        n_q: summaries[0].n_q,
        digest,
    };
    std::fs::write(out.join(AGGREGATE_FILE), serde_json::to_string_pretty(&aggregate)?)?;
    Ok(aggregate)
}

#[allow(clippy::too_many_arguments)]
fn distill_seed(
    cfg: &ExperimentConfig,
    teacher: Option<&StagedBackbone>,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    dir: &Path,
    digest: &str,
    label: &str,
) -> Result<RunSummary> {
    let student = StagedBackbone::build(&cfg.student_spec(), seed, cfg.dtype)?;
    let teacher = teacher.map(StagedBackbone::frozen_copy).transpose()?;
    let total_steps = cfg.epochs * steps_per_epoch(cfg, train);
    let mut session = DistillSession::new(cfg.distill_config(seed, total_steps), teacher, student)?;
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }
    let mut sink = MetricsSink::open(&metrics, digest)?;
    let accuracy = run_epochs(&mut session, cfg, seed, train, test, &mut sink, 0, |_| Ok(()))?;
    if let Some(att) = session.last_attention() {
        write_attention_csv(&att.mean(0)?, &dir.join(ATTENTION_FILE))?;
    }
    let student = session.student();
    Checkpoint {
        meta: CheckpointMeta {
            kind: "session".into(),
            ..backbone_meta(student, seed, session.epoch(), session.step_count(), digest, "session")
        },
        tensors: session.tensors(),
    }
    .save(&dir.join(SESSION_FILE))?;
    Ok(RunSummary {
        label: label.to_string(),
        method: cfg.method.name().into(),
        teacher: cfg.teacher_model.name().into(),
        student: cfg.student_model.name().into(),
        seed,
        final_accuracy: accuracy,
        extra_params: session.count_extra_parameters(),
        n_q: session.raa().map(|r| r.config().n_q),
        fraction: cfg.fraction,
        epochs: cfg.epochs,
        steps: session.step_count(),
        digest: digest.to_string(),
    })
}

/// Writes an `(N, N)` matrix as CSV, one row per line.
pub fn write_attention_csv(matrix: &Tensor, path: &Path) -> Result<()> {
    let rows = matrix.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let text: String = rows
        .iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_attention_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::Input(format!("{}: bad value `{v}`", path.display())))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
