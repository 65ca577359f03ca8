//! Datasets: CIFAR-10/100 binary readers, a seeded synthetic generator,
//! stratified subsetting and crop/flip augmentation.
//!
//! CIFAR records are `label, 3072 pixels` (CIFAR-10, 3073 bytes) or
//! `coarse, fine, 3072 pixels` (CIFAR-100, 3074 bytes). Pixels are stored
//! channel-major (R, G, B), each channel 32×32 row-major.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Published per-channel statistics of the training split.
    pub fn normalization(self) -> Normalization {
        match self {
            CifarVariant::Cifar10 => Normalization {
                mean: [0.4914, 0.4822, 0.4465],
                std: [0.2470, 0.2435, 0.2616],
            },
            CifarVariant::Cifar100 => Normalization {
                mean: [0.5071, 0.4865, 0.4409],
                std: [0.2673, 0.2564, 0.2762],
            },
        }
    }

    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, _) => vec!["test_batch.bin"],
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin"],
            (CifarVariant::Cifar100, _) => vec!["test.bin"],
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            _ => Err(Error::config("data.variant", format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `cifar10:/path`, `synthetic`, ...
    pub source: String,
    /// SHA-256 over the raw input files, for file-backed datasets.
    pub checksum: Option<String>,
    pub seed: Option<u64>,
    pub normalization: Normalization,
}

/// One undecoded CIFAR record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    /// CIFAR-100 only.
    pub coarse: Option<u8>,
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Splits a CIFAR binary blob into records, checking length and labels.
pub fn decode_cifar(bytes: &[u8], variant: CifarVariant, path: &str) -> Result<Vec<CifarRecord>> {
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        let complete = bytes.len() / rec;
        return Err(Error::Data {
            path: path.to_string(),
            offset: (complete * rec) as u64,
            msg: format!(
                "file length {} is not a positive multiple of the {rec}-byte record size; last record truncated",
                bytes.len()
            ),
        });
    }
    let classes = variant.num_classes();
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, chunk)| {
            let offset = (i * rec) as u64;
            let (coarse, label, pixels) = match variant {
                CifarVariant::Cifar10 => (None, chunk[0], &chunk[1..]),
                CifarVariant::Cifar100 => {
                    if chunk[0] >= 20 {
                        return Err(Error::Data {
                            path: path.to_string(),
                            offset,
                            msg: format!("coarse label {} out of range 0..20", chunk[0]),
                        });
                    }
                    (Some(chunk[0]), chunk[1], &chunk[2..])
                }
            };
            if label as usize >= classes {
                let label_offset = offset + if coarse.is_some() { 1 } else { 0 };
                return Err(Error::Data {
                    path: path.to_string(),
                    offset: label_offset,
                    msg: format!("label {label} out of range 0..{classes}"),
                });
            }
            Ok(CifarRecord {
                coarse,
                label,
                pixels: pixels.to_vec(),
            })
        })
        .collect()
}

pub fn encode_cifar(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        if let Some(c) = r.coarse {
            out.push(c);
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

/// Normalized images with integer labels, stored on the host.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(N, 3, side, side)` row-major.
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub image_size: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_numel(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_numel();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// A new dataset holding `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_numel());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            image_size: self.image_size,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    /// Images and labels for `indices`, optionally augmented.
    pub fn batch(
        &self,
        indices: &[usize],
        dtype: DType,
        augment: Option<(&Augment, &mut ChaCha8Rng)>,
    ) -> Result<(Tensor, Tensor)> {
        let s = self.image_size;
        let mut buf = Vec::with_capacity(indices.len() * self.image_numel());
        match augment {
            Some((aug, rng)) => {
                for &i in indices {
                    buf.extend(aug.apply(self.image(i), s, rng));
                }
            }
            None => {
                for &i in indices {
                    buf.extend_from_slice(self.image(i));
                }
            }
        }
        let images = Tensor::from_vec(buf, (indices.len(), 3, s, s), &Device::Cpu)?.to_dtype(dtype)?;
        let labels: Vec<u32> = indices.iter().map(|&i| self.labels[i]).collect();
        let labels = Tensor::from_vec(labels, indices.len(), &Device::Cpu)?;
        Ok((images, labels))
    }

    /// Index batches for one epoch. With a seed the order is a seeded
    /// shuffle that depends on `epoch`; without one it is sequential.
    pub fn batches(&self, batch_size: usize, shuffle: Option<(u64, u64)>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some((seed, epoch)) = shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
        }
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

fn resolve_cifar_dir(root: &Path, variant: CifarVariant, first: &str) -> PathBuf {
    let nested = root.join(variant.subdir());
    if nested.join(first).exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Reads one split of CIFAR-10/100 from `root` (or its standard
/// `cifar-10-batches-bin` / `cifar-100-binary` subdirectory).
pub fn load_cifar(root: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let files = variant.files(split);
    let dir = resolve_cifar_dir(root, variant, files[0]);
    let norm = variant.normalization();
    let mut hasher = Sha256::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let shown = path.display().to_string();
        let bytes = std::fs::read(&path).map_err(|e| Error::Data {
            path: shown.clone(),
            offset: 0,
            msg: format!("cannot read file: {e}"),
        })?;
        hasher.update(&bytes);
        for r in decode_cifar(&bytes, variant, &shown)? {
            labels.push(r.label as u32);
            images.extend(normalize_pixels(&r.pixels, &norm));
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: variant.num_classes(),
        image_size: CIFAR_SIDE,
        split,
        provenance: Provenance {
            source: format!("{}:{}", variant_name(variant), dir.display()),
            checksum: Some(hex::encode(hasher.finalize())),
            seed: None,
            normalization: norm,
        },
    })
}

fn variant_name(v: CifarVariant) -> &'static str {
    match v {
        CifarVariant::Cifar10 => "cifar10",
        CifarVariant::Cifar100 => "cifar100",
    }
}

pub fn normalize_pixels(pixels: &[u8], norm: &Normalization) -> Vec<f32> {
    let plane = pixels.len() / 3;
    pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = i / plane;
            (p as f32 / 255.0 - norm.mean[c]) / norm.std[c]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub n: usize,
    pub image_size: usize,
    /// Per-pixel noise standard deviation; class prototypes have unit scale.
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, num_classes: usize, n: usize, image_size: usize) -> Self {
        Self {
            seed,
            num_classes,
            n,
            image_size,
            noise: 0.5,
        }
    }
}

/// Class-conditional Gaussian-blob images. Each class owns a few colored
/// blobs at fixed random positions; samples add pixel noise and a small
/// random shift of the blob centers.
pub fn synth_dataset(seed: u64, num_classes: usize, n: usize, image_size: usize) -> Result<Dataset> {
    synth_dataset_with(&SynthConfig::new(seed, num_classes, n, image_size))
}

pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 {
        return Err(Error::config("data.num_classes", "need at least 2 classes"));
    }
    if cfg.n < cfg.num_classes {
        return Err(Error::config(
            "data.n",
            format!("n = {} is smaller than num_classes = {}", cfg.n, cfg.num_classes),
        ));
    }
    if cfg.image_size < 4 {
        return Err(Error::config("data.image_size", "must be at least 4"));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::config("data.noise", "must be ≥ 0"));
    }
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    struct Blob {
        cy: f64,
        cx: f64,
        radius: f64,
        color: [f64; 3],
    }
    let prototypes: Vec<Vec<Blob>> = (0..cfg.num_classes)
        .map(|_| {
            (0..3)
                .map(|_| Blob {
                    cy: rng.random_range(0.15..0.85) * s as f64,
                    cx: rng.random_range(0.15..0.85) * s as f64,
                    radius: rng.random_range(0.08..0.2) * s as f64,
                    color: [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)],
                })
                .collect()
        })
        .collect();

    let mut labels: Vec<u32> = (0..cfg.n).map(|i| (i % cfg.num_classes) as u32).collect();
    labels.shuffle(&mut rng);

    let jitter = 0.05 * s as f64;
    let mut images = Vec::with_capacity(cfg.n * 3 * s * s);
    for &label in &labels {
        let blobs = &prototypes[label as usize];
        let shifts: Vec<(f64, f64)> = blobs
            .iter()
            .map(|_| (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter)))
            .collect();
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let mut v = 0.0;
                    for (b, (dy, dx)) in blobs.iter().zip(&shifts) {
                        let ry = y as f64 + 0.5 - (b.cy + dy);
                        let rx = x as f64 + 0.5 - (b.cx + dx);
                        v += b.color[c] * (-(ry * ry + rx * rx) / (2.0 * b.radius * b.radius)).exp();
                    }
                    v += cfg.noise * unit.sample(&mut rng);
                    images.push(v as f32);
                }
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: cfg.num_classes,
        image_size: s,
        split: Split::Train,
        provenance: Provenance {
            source: "synthetic".into(),
            checksum: None,
            seed: Some(cfg.seed),
            normalization: Normalization::identity(),
        },
    })
}

/// Stratified per-class sample of `fraction` of the indices, in ascending
/// order. Each class keeps `round(fraction · count)` samples, at least one.
pub fn subset_indices(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(
            "data.fraction",
            format!("must lie in (0, 1], got {fraction}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for class in 0..dataset.num_classes {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] as usize == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let keep = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        if keep < members.len() {
            members.shuffle(&mut rng);
            members.truncate(keep);
        }
        picked.extend(members);
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn subset_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    Ok(dataset.select(&subset_indices(dataset, fraction, seed)?))
}

/// Random crop from a zero-padded image plus horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub enabled: bool,
    pub pad: usize,
    pub flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            enabled: true,
            pad: 4,
            flip: true,
        }
    }
}

impl Augment {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Default::default()
        }
    }

    /// Augments one `(3, side, side)` image.
    pub fn apply(&self, image: &[f32], side: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        if !self.enabled {
            return image.to_vec();
        }
        let dy = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
        let dx = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
        let flip = self.flip && rng.random_bool(0.5);
        let mut out = vec![0.0f32; image.len()];
        let s = side as isize;
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let sy = y + dy;
                    let sx0 = x + dx;
                    let sx = if flip { s - 1 - sx0 } else { sx0 };
                    if (0..s).contains(&sy) && (0..s).contains(&sx) {
                        out[(c * side + y as usize) * side + x as usize] =
                            image[(c * side + sy as usize) * side + sx as usize];
                    }
                }
            }
        }
        out
    }
}
