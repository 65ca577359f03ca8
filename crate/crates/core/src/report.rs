//! Tables and figures from finished run directories.
//!
//! Outputs (all deterministic, so re-running overwrites with identical
//! files):
//! * `accuracy.csv` / `accuracy.md`: one row per run, final test accuracy
//!   read from each seed's metrics file, mean ± std over seeds.
//! * `nq.csv` / `nq.md`: PAT runs with RAA grouped by query count, with
//!   extra parameters and attention-map memory per sample.
//! * `attention_<label>_seed<k>_<digest>.png` / `.csv`: `N_q × N_q`
//!   heatmaps with queries reordered patch-major (all stages of patch 0,
//!   then patch 1...).
//! * `loss_<label>_seed<k>_<digest>.csv` / `.svg`: per-step loss components.
//!
//! Tables carry a digest column, and per-seed files carry the digest in
//! their names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::experiment::{
    mean_std, read_attention_csv, Aggregate, AGGREGATE_FILE, ATTENTION_FILE, CONFIG_FILE,
    METRICS_FILE,
};
use crate::metrics::{read_metrics, MetricLine};
use crate::raa::{RaaConfig, NQ_SWEEP};

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub final_accuracy: f64,
    pub records: Vec<MetricLine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub dir: PathBuf,
    pub aggregate: Aggregate,
    pub seeds: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
    pub runs: Vec<RunResult>,
}

fn find_run_dirs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.join(CONFIG_FILE).exists() {
        out.push(root.to_path_buf());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        find_run_dirs(&c, out)?;
    }
    Ok(())
}

/// Loads every run below `root`. Runs that are missing their aggregate or
/// any seed's metrics (or whose metrics lack a test record) are listed in
/// the error.
pub fn collect_runs(root: &Path) -> Result<Vec<RunResult>> {
    if !root.is_dir() {
        return Err(Error::Input(format!("{} is not a directory", root.display())));
    }
    let mut dirs = Vec::new();
    find_run_dirs(root, &mut dirs)?;
    let mut incomplete = Vec::new();
    let mut runs = Vec::new();
    for dir in dirs {
        // teacher pretraining directories have metrics but no seeds
        if dir.join(crate::experiment::TEACHER_FILE).exists() {
            continue;
        }
        let agg_path = dir.join(AGGREGATE_FILE);
        if !agg_path.exists() {
            incomplete.push(agg_path);
            continue;
        }
        let aggregate: Aggregate = serde_json::from_str(&std::fs::read_to_string(&agg_path)?)?;
        let mut seeds = Vec::new();
        for &seed in &aggregate.seeds {
            let sdir = dir.join(format!("seed{seed}"));
            let mpath = sdir.join(METRICS_FILE);
            if !mpath.exists() {
                incomplete.push(mpath);
                continue;
            }
            let records = read_metrics(&mpath)?;
            match records.iter().rev().find(|r| r.record.split == "test") {
                Some(last) => seeds.push(SeedResult {
                    seed,
                    dir: sdir,
                    final_accuracy: last.record.accuracy.unwrap_or(0.0),
                    records,
                }),
                None => incomplete.push(mpath),
            }
        }
        let accs: Vec<f64> = seeds.iter().map(|s| s.final_accuracy).collect();
        if accs.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&accs);
        runs.push(RunResult {
            dir,
            aggregate,
            seeds,
            mean,
            std,
        });
    }
    if !incomplete.is_empty() {
        let list: Vec<String> = incomplete.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Input(format!(
            "missing or incomplete run artifacts:\n  {}",
            list.join("\n  ")
        )));
    }
    runs.sort_by(|a, b| a.aggregate.label.cmp(&b.aggregate.label).then(a.dir.cmp(&b.dir)));
    Ok(runs)
}

pub fn accuracy_csv(runs: &[RunResult]) -> String {
    let mut s = String::from("label,method,teacher,student,seeds,accuracies,mean,std,extra_params,digest\n");
    for r in runs {
        let a = &r.aggregate;
        let seeds: Vec<String> = r.seeds.iter().map(|x| x.seed.to_string()).collect();
        let accs: Vec<String> = r.seeds.iter().map(|x| x.final_accuracy.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            a.label,
            a.method,
            a.teacher,
            a.student,
            seeds.join(";"),
            accs.join(";"),
            r.mean,
            r.std,
            a.extra_params,
            a.digest
        );
    }
    s
}

pub fn accuracy_markdown(runs: &[RunResult]) -> String {
    let mut s = String::from(
        "| run | method | teacher → student | seeds | accuracy (%) | extra params (M) | digest |\n|---|---|---|---|---|---|---|\n",
    );
    for r in runs {
        let a = &r.aggregate;
        let _ = writeln!(
            s,
            "| {} | {} | {} → {} | {} | {:.2} ± {:.2} | {:.4} | {} |",
            a.label,
            a.method,
            a.teacher,
            a.student,
            r.seeds.len(),
            100.0 * r.mean,
            100.0 * r.std,
            a.extra_params as f64 / 1e6,
            a.digest
        );
    }
    s
}

/// Rows of the query-count table, including rejected sweep values.
pub fn nq_rows(runs: &[RunResult]) -> Vec<(usize, Option<&RunResult>, Option<String>)> {
    let mut by_nq: BTreeMap<usize, &RunResult> = BTreeMap::new();
    for r in runs {
        if let Some(nq) = r.aggregate.n_q {
            by_nq.entry(nq).or_insert(r);
        }
    }
    let mut rows: Vec<(usize, Option<&RunResult>, Option<String>)> =
        by_nq.iter().map(|(&nq, &r)| (nq, Some(r), None)).collect();
    for nq in NQ_SWEEP {
        if by_nq.contains_key(&nq) {
            continue;
        }
        if let Err(e) = RaaConfig::new(nq, 1).validate() {
            rows.push((nq, None, Some(e.to_string())));
        }
    }
    rows.sort_by_key(|r| r.0);
    rows
}

pub fn nq_csv(runs: &[RunResult]) -> String {
    let mut s = String::from("n_q,label,mean,std,extra_params,attention_bytes_per_sample,digest,note\n");
    for (nq, run, note) in nq_rows(runs) {
        match run {
            Some(r) => {
                let _ = writeln!(
                    s,
                    "{nq},{},{},{},{},{},{},",
                    r.aggregate.label,
                    r.mean,
                    r.std,
                    r.aggregate.extra_params,
                    nq * nq * 4,
                    r.aggregate.digest
                );
            }
            None => {
                let _ = writeln!(s, "{nq},,,,,,,\"{}\"", note.unwrap_or_default().replace('"', "'"));
            }
        }
    }
    s
}

pub fn nq_markdown(runs: &[RunResult]) -> String {
    let mut s = String::from(
        "| N_q | run | accuracy (%) | extra params (M) | attention map (KiB/sample) | digest |\n|---|---|---|---|---|---|\n",
    );
    for (nq, run, note) in nq_rows(runs) {
        match run {
            Some(r) => {
                let _ = writeln!(
                    s,
                    "| {nq} | {} | {:.2} ± {:.2} | {:.4} | {:.1} | {} |",
                    r.aggregate.label,
                    100.0 * r.mean,
                    100.0 * r.std,
                    r.aggregate.extra_params as f64 / 1e6,
                    (nq * nq * 4) as f64 / 1024.0,
                    r.aggregate.digest
                );
            }
            None => {
                let _ = writeln!(s, "| {nq} | rejected: {} | | | | |", note.unwrap_or_default());
            }
        }
    }
    s
}

/// Permutation from stage-major query order (stage 1 patches, stage 2
/// patches, ...) to patch-major order (patch 0 of stages 1..4, patch 1...).
pub fn patch_major_order(n_q: usize) -> Vec<usize> {
    let per = n_q / 4;
    (0..per).flat_map(|p| (0..4).map(move |s| s * per + p)).collect()
}

pub fn reorder(matrix: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let order = patch_major_order(matrix.len());
    order
        .iter()
        .map(|&i| order.iter().map(|&j| matrix[i][j]).collect())
        .collect()
}

fn heat(t: f64) -> Rgb<u8> {
    // black → red → yellow → white
    let t = t.clamp(0.0, 1.0);
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    Rgb([(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8])
}

/// One pixel per attention entry, scaled to the matrix's own range.
pub fn heatmap(matrix: &[Vec<f64>]) -> RgbImage {
    let n = matrix.len() as u32;
    let (lo, hi) = matrix
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(n, n, |x, y| heat((matrix[y as usize][x as usize] - lo) / span))
}

fn loss_csv(records: &[MetricLine]) -> String {
    let mut s = String::from("step,epoch,ce,kl,fd,reg,total\n");
    for r in records.iter().filter(|r| r.record.split == "train") {
        let m = &r.record;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", m.step, m.epoch, m.ce, m.kl, m.fd, m.reg, m.total);
    }
    s
}

fn loss_svg(records: &[MetricLine], title: &str) -> String {
    let train: Vec<_> = records.iter().filter(|r| r.record.split == "train").map(|r| &r.record).collect();
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let series: [(&str, &str, Box<dyn Fn(&crate::distiller::MetricRecord) -> f64>); 5] = [
        ("ce", "#1f77b4", Box::new(|m| m.ce)),
        ("kl", "#ff7f0e", Box::new(|m| m.kl)),
        ("fd", "#2ca02c", Box::new(|m| m.fd)),
        ("reg", "#d62728", Box::new(|m| m.reg)),
        ("total", "#000000", Box::new(|m| m.total)),
    ];
    let ymax = train
        .iter()
        .flat_map(|m| series.iter().map(move |(_, _, f)| f(m)))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let n = train.len().max(2) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{pad}\" y=\"20\" font-size=\"12\">{title} (max {ymax:.4})</text>\n"
    );
    for (k, (name, color, f)) in series.iter().enumerate() {
        let pts: Vec<String> = train
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
                let y = h - pad - (h - 2.0 * pad) * f(m) / ymax;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            pts.join(" "),
            w - pad + 4.0,
            pad + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes all report artifacts for the runs under `root` into `out`.
pub fn write_report(root: &Path, out: &Path) -> Result<ReportFiles> {
    let runs = collect_runs(root)?;
    if runs.is_empty() {
        return Err(Error::Input(format!("no runs found under {}", root.display())));
    }
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut emit = |name: String, bytes: &[u8]| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    emit("accuracy.csv".into(), accuracy_csv(&runs).as_bytes())?;
    emit("accuracy.md".into(), accuracy_markdown(&runs).as_bytes())?;
    emit("nq.csv".into(), nq_csv(&runs).as_bytes())?;
    emit("nq.md".into(), nq_markdown(&runs).as_bytes())?;
    for r in &runs {
        for s in &r.seeds {
            let stem = format!("{}_seed{}_{}", r.aggregate.label, s.seed, r.aggregate.digest);
            emit(format!("loss_{stem}.csv"), loss_csv(&s.records).as_bytes())?;
            emit(
                format!("loss_{stem}.svg"),
                loss_svg(&s.records, &format!("{} [{}]", stem, r.aggregate.digest)).as_bytes(),
            )?;
            let att = s.dir.join(ATTENTION_FILE);
            if att.exists() {
                let m = reorder(&read_attention_csv(&att)?);
                let csv: String = m
                    .iter()
                    .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
                    .collect();
                emit(format!("attention_{stem}.csv"), csv.as_bytes())?;
                let mut png = Vec::new();
                heatmap(&m)
                    .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
                    .map_err(|e| Error::Input(format!("png encoding failed: {e}")))?;
                emit(format!("attention_{stem}.png"), &png)?;
            }
        }
    }
    Ok(ReportFiles { files, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_major_permutation() {
        assert_eq!(patch_major_order(8), vec![0, 2, 4, 6, 1, 3, 5, 7]);
        let mut seen = patch_major_order(64);
        seen.sort_unstable();
        assert_eq!(seen, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn heatmap_has_matrix_size() {
        let m: Vec<Vec<f64>> = (0..36).map(|i| (0..36).map(|j| (i * j) as f64).collect()).collect();
        let img = heatmap(&reorder(&m));
        assert_eq!(img.dimensions(), (36, 36));
        assert_eq!(img.get_pixel(0, 0), &Rgb([0, 0, 0]));
    }

    #[test]
    fn nq_rows_mark_invalid_sweep_values() {
        let rows = nq_rows(&[]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, 80);
        assert!(rows[0].2.as_ref().unwrap().contains("perfect square"));
    }
}
