//! End-to-end runs through the experiment layer on small synthetic data.

use std::path::Path;

use pat_core::backbones::BackboneKind;
use pat_core::checkpoint::Checkpoint;
use pat_core::config::ExperimentConfig;
use pat_core::distiller::Method;
use pat_core::experiment::{
    distill, pretrain_teacher, read_attention_csv, Aggregate, AGGREGATE_FILE, ATTENTION_FILE, METRICS_FILE,
    SESSION_FILE, SUMMARY_FILE,
};
use pat_core::metrics::read_metrics;
use pat_core::raa::RaaConfig;
use pat_core::report::write_report;
use pat_core::Error;

fn base(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        teacher_model: BackboneKind::TinyCnn,
        student_model: BackboneKind::TinyVit,
        num_classes: 4,
        input_size: 16,
        train_size: 96,
        test_size: 32,
        epochs: 2,
        batch_size: 16,
        raa: RaaConfig::new(16, 16),
        output_dir: out.to_path_buf(),
        ..Default::default()
    }
}

fn teacher(root: &Path) -> ExperimentConfig {
    let mut cfg = base(&root.join("teacher"));
    pretrain_teacher(&cfg, false).unwrap();
    cfg.teacher_checkpoint = Some(root.join("teacher").join("teacher.safetensors"));
    cfg
}

fn tensor_bits(path: &Path) -> Vec<(String, Vec<u8>)> {
    Checkpoint::load(path)
        .unwrap()
        .tensors
        .iter()
        .map(|(k, t)| {
            let v = t.flatten_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_vec1::<f64>().unwrap();
            (k.clone(), v.iter().flat_map(|x| x.to_le_bytes()).collect())
        })
        .collect()
}

#[test]
fn pretrain_resumes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(&dir.path().join("a"));
    cfg.epochs = 1;
    let first = pretrain_teacher(&cfg, false).unwrap();
    assert_eq!(first.epochs, 1);
    cfg.epochs = 2;
    let resumed = pretrain_teacher(&cfg, true).unwrap();
    assert_eq!(resumed.epochs, 2);
    let meta = Checkpoint::load(&resumed.checkpoint).unwrap().meta;
    assert_eq!((meta.epoch, meta.step), (2, 12));
    let epochs: Vec<u64> = read_metrics(&dir.path().join("a").join(METRICS_FILE))
        .unwrap()
        .iter()
        .filter(|l| l.record.split == "test")
        .map(|l| l.record.epoch)
        .collect();
    assert_eq!(epochs, vec![1, 2]);

    let mut other = base(&dir.path().join("b"));
    other.epochs = 2;
    let mut again = base(&dir.path().join("c"));
    again.epochs = 2;
    let b = pretrain_teacher(&other, false).unwrap();
    let c = pretrain_teacher(&again, false).unwrap();
    assert_eq!(tensor_bits(&b.checkpoint), tensor_bits(&c.checkpoint));
    let strip = |p: &Path| -> Vec<_> {
        read_metrics(&p.join(METRICS_FILE)).unwrap().into_iter().map(|l| l.record).collect()
    };
    let (mb, mc) = (strip(&dir.path().join("b")), strip(&dir.path().join("c")));
    assert!(mb.iter().zip(&mc).all(|(x, y)| x.same_run_values(y)) && mb.len() == mc.len());
}

#[test]
fn teacher_reaches_high_accuracy_on_clean_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        num_classes: 10,
        train_size: 640,
        test_size: 200,
        noise: 0.25,
        epochs: 20,
        batch_size: 32,
        ..base(dir.path())
    };
    let out = pretrain_teacher(&cfg, false).unwrap();
    assert!(out.accuracy > 0.9, "teacher accuracy {}", out.accuracy);
}

#[test]
fn distill_requires_an_existing_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(dir.path());
    assert!(matches!(distill(&cfg), Err(Error::Config { field, .. }) if field == "teacher.checkpoint"));
    cfg.teacher_checkpoint = Some(dir.path().join("nope.safetensors"));
    assert!(matches!(distill(&cfg), Err(Error::Config { field, .. }) if field == "teacher.checkpoint"));
    cfg.method = Method::Scratch;
    cfg.epochs = 1;
    assert!(distill(&cfg).is_ok());
}

#[test]
fn methods_seeds_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let t = teacher(root);
    let runs = root.join("runs");
    let mut pat = t.clone();
    pat.seeds = vec![0, 1, 2];
    pat.output_dir = runs.join("pat");
    let agg = distill(&pat).unwrap();
    assert_eq!(agg.accuracies.len(), 3);
    let on_disk: Aggregate =
        serde_json::from_str(&std::fs::read_to_string(runs.join("pat").join(AGGREGATE_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, agg);
    let mean = agg.accuracies.iter().sum::<f64>() / 3.0;
    assert!((agg.mean - mean).abs() < 1e-12);
    for seed in 0..3 {
        let sdir = runs.join("pat").join(format!("seed{seed}"));
        for f in [METRICS_FILE, SUMMARY_FILE, ATTENTION_FILE, SESSION_FILE] {
            assert!(sdir.join(f).exists(), "{f} for seed {seed}");
        }
        let lines = read_metrics(&sdir.join(METRICS_FILE)).unwrap();
        assert!(lines.iter().all(|l| l.digest == agg.digest));
        for l in &lines {
            l.record.audit().unwrap();
        }
        let att = read_attention_csv(&sdir.join(ATTENTION_FILE)).unwrap();
        assert_eq!((att.len(), att[0].len()), (16, 16));
    }
    for method in [Method::Kd, Method::Fitnet, Method::Scratch] {
        let mut c = t.clone();
        c.method = method;
        c.output_dir = runs.join(method.name());
        let a = distill(&c).unwrap();
        assert_eq!(a.extra_params == 0, matches!(method, Method::Kd | Method::Scratch));
        assert!(!runs.join(method.name()).join("seed0").join(ATTENTION_FILE).exists());
    }

    let out = root.join("report");
    let files = write_report(root, &out).unwrap();
    assert_eq!(files.runs.len(), 4);
    let csv = std::fs::read_to_string(out.join("accuracy.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let run_dir = runs.join(cols[1]);
        let seeds: Vec<u64> = cols[4].split(';').map(|s| s.parse().unwrap()).collect();
        let accs: Vec<f64> = cols[5].split(';').map(|s| s.parse().unwrap()).collect();
        for (seed, acc) in seeds.iter().zip(&accs) {
            let lines = read_metrics(&run_dir.join(format!("seed{seed}")).join(METRICS_FILE)).unwrap();
            let last = lines.iter().rev().find(|l| l.record.split == "test").unwrap();
            assert_eq!(last.record.accuracy.unwrap(), *acc);
        }
        let mean: f64 = cols[6].parse().unwrap();
        assert!((mean - accs.iter().sum::<f64>() / accs.len() as f64).abs() < 1e-12);
    }
    let pngs: Vec<_> = files.files.iter().filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
    assert_eq!(pngs.len(), 3);
    for p in &pngs {
        assert!(p.to_string_lossy().contains(&agg.digest));
        let img = image::open(p).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
    }

    let snapshot = |files: &[std::path::PathBuf]| -> Vec<Vec<u8>> { files.iter().map(|p| std::fs::read(p).unwrap()).collect() };
    let before = snapshot(&files.files);
    let again = write_report(root, &out).unwrap();
    assert_eq!(again.files, files.files);
    assert_eq!(snapshot(&again.files), before);

    std::fs::remove_file(runs.join("kd").join("seed0").join(METRICS_FILE)).unwrap();
    match write_report(root, &out) {
        Err(Error::Input(msg)) => assert!(msg.contains("kd"), "{msg}"),
        other => panic!("expected an input error, got {other:?}"),
    }
}
