//! `pat`: pretrain teachers, run distillation methods and ablations,
//! evaluate checkpoints and render reports.
//!
//! Settings come from an optional `key = value` config file, then
//! `--set key=value` overrides, then the named flags. Later sources win.
//!
//! Exit status is 0 on success, 2 for configuration or usage errors, 3 when
//! a loss goes non-finite, and 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pat_core::config::ExperimentConfig;
use pat_core::experiment::{distill, evaluate_checkpoint, pretrain_teacher};
use pat_core::report::write_report;
use pat_core::Error;

#[derive(Parser)]
#[command(name = "pat", version, about = "Heterogeneous feature distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher with cross-entropy only.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Distill a student with one method, once per seed.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: DistillFlags,
    },
    /// Score a teacher or session checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Tables, attention heatmaps and loss curves for every run under a directory.
    Report {
        /// Directory searched recursively for run directories.
        #[arg(long)]
        runs: PathBuf,
        /// Where to write the report (defaults to `<runs>/report`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Config file in `key = value` form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct DistillFlags {
    /// pat, kd, fitnet or scratch.
    #[arg(long)]
    method: Option<String>,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    no_raa: bool,
    #[arg(long)]
    no_afp: bool,
    #[arg(long)]
    no_feedback: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Total RAA query count (36, 64, 80, 144, ...).
    #[arg(long)]
    nq: Option<usize>,
    /// Comma-separated stages carrying an adapter, e.g. `2,3`.
    #[arg(long)]
    afp_stages: Option<String>,
    /// Fraction of the training split to keep, per class.
    #[arg(long)]
    fraction: Option<f64>,
}

fn build_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for pair in &common.sets {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(e) = common.epochs {
        cfg.epochs = e;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = &common.seeds {
        cfg.set("train.seeds", s)?;
    }
    Ok(cfg)
}

fn apply_distill_flags(cfg: &mut ExperimentConfig, f: &DistillFlags) -> Result<(), Error> {
    if let Some(m) = &f.method {
        cfg.set("method", m)?;
    }
    if let Some(t) = &f.teacher {
        cfg.teacher_checkpoint = Some(t.clone());
    }
    if f.no_raa {
        cfg.raa_enabled = false;
    }
    if f.no_afp {
        cfg.afp_enabled = false;
    }
    if f.no_feedback {
        cfg.afp.use_feedback = false;
    }
    if let Some(a) = f.alpha {
        cfg.weights.alpha = a;
    }
    if let Some(b) = f.beta {
        cfg.weights.beta = b;
    }
    if let Some(g) = f.gamma {
        cfg.weights.gamma = g;
    }
    if let Some(n) = f.nq {
        cfg.raa.n_q = n;
    }
    if let Some(s) = &f.afp_stages {
        cfg.set("afp.stages", s)?;
    }
    if let Some(fr) = f.fraction {
        cfg.fraction = fr;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::PretrainTeacher { common, resume } => {
            let cfg = build_config(&common)?;
            let out = pretrain_teacher(&cfg, resume)?;
            println!(
                "teacher {} after {} epochs: test accuracy {:.4}, checkpoint {} (digest {})",
                cfg.teacher_model.name(),
                out.epochs,
                out.accuracy,
                out.checkpoint.display(),
                out.digest
            );
        }
        Command::Distill { common, flags } => {
            let mut cfg = build_config(&common)?;
            apply_distill_flags(&mut cfg, &flags)?;
            let agg = distill(&cfg)?;
            println!(
                "{} {} <- {}: accuracy {:.4} ± {:.4} over {} seed(s), {} extra parameters (digest {})",
                agg.label,
                agg.teacher,
                agg.student,
                agg.mean,
                agg.std,
                agg.seeds.len(),
                agg.extra_params,
                agg.digest
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = build_config(&common)?;
            let out = evaluate_checkpoint(&cfg, &checkpoint)?;
            println!(
                "{} on {} test samples: accuracy {:.4}, cross-entropy {:.4} (digest {})",
                out.model, out.samples, out.accuracy, out.ce, out.digest
            );
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs.join("report"));
            let files = write_report(&runs, &out)?;
            println!("{} runs, {} files written to {}", files.runs.len(), files.files.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Usage(_) => 2,
        Error::Numeric { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
