//! Synthetic "biased" quality datasets with known ground truth.
//!
//! Each dataset draws its images from a restricted set of degradation kinds and
//! reports labels through its own monotone remap of the true quality
//! `q* = 1 - magnitude`. Scorers trained on one such dataset see a narrow slice
//! of the distortion space and a dataset-specific label scale.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{quantize16, write_manifest, DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, rng_from_seed};

pub const MIN_IMAGE_SIZE: usize = 8;
pub const DEFAULT_IMAGE_SIZE: usize = 48;

/// Blur sigma in pixels at magnitude 1.
pub const BLUR_SIGMA_PER_MAGNITUDE: f64 = 4.0;
/// Noise standard deviation at magnitude 1.
pub const NOISE_STD_PER_MAGNITUDE: f64 = 0.3;
/// Contrast shrink at magnitude 1.
pub const CONTRAST_SHRINK_PER_MAGNITUDE: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianBlur,
    AdditiveNoise,
    ContrastReduction,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 3] = [
        DegradationKind::GaussianBlur,
        DegradationKind::AdditiveNoise,
        DegradationKind::ContrastReduction,
    ];
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegradationKind::GaussianBlur => "gaussian_blur",
            DegradationKind::AdditiveNoise => "additive_noise",
            DegradationKind::ContrastReduction => "contrast_reduction",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub magnitude: f64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, magnitude: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&magnitude) {
            return Err(Error::invalid(format!(
                "magnitude {magnitude} not in [0, 1]"
            )));
        }
        Ok(Self { kind, magnitude })
    }
}

/// Strictly increasing maps of `[0, 1]` onto itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRemap {
    Identity,
    Sqrt,
    Square,
    LogisticSteep,
}

impl LabelRemap {
    const STEEPNESS: f64 = 10.0;

    pub fn apply(self, q: f64) -> f64 {
        match self {
            LabelRemap::Identity => q,
            LabelRemap::Sqrt => q.sqrt(),
            LabelRemap::Square => q * q,
            LabelRemap::LogisticSteep => {
                let s = |t: f64| 1.0 / (1.0 + (-Self::STEEPNESS * (t - 0.5)).exp());
                let (lo, hi) = (s(0.0), s(1.0));
                (s(q) - lo) / (hi - lo)
            }
        }
    }
}

fn default_image_size() -> usize {
    DEFAULT_IMAGE_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasedDatasetConfig {
    pub name: String,
    pub n_images: usize,
    pub allowed_kinds: Vec<DegradationKind>,
    pub label_remap: LabelRemap,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

impl BiasedDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::Config(format!(
                "dataset name {:?} must be non-empty [A-Za-z0-9_-]",
                self.name
            )));
        }
        if self.n_images == 0 {
            return Err(Error::Config(format!(
                "dataset {}: n_images is 0",
                self.name
            )));
        }
        if self.allowed_kinds.is_empty() {
            return Err(Error::Config(format!(
                "dataset {}: allowed_kinds is empty",
                self.name
            )));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "dataset {}: image_size {} < {MIN_IMAGE_SIZE}",
                self.name, self.image_size
            )));
        }
        Ok(())
    }
}

/// True quality per image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth(pub BTreeMap<String, f64>);

impl GroundTruth {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.0.get(id).copied()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,qstar\n");
        for (id, q) in &self.0 {
            out.push_str(&format!("{id},{q}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let mut map = BTreeMap::new();
        for row in rdr.records() {
            let row = row.map_err(|source| Error::Csv {
                path: path.to_path_buf(),
                source,
            })?;
            let q: f64 = row[1].parse().map_err(|_| Error::InvalidRecord {
                id: row[0].to_string(),
                reason: format!("qstar {:?} is not a number", &row[1]),
            })?;
            if map.insert(row[0].to_string(), q).is_some() {
                return Err(Error::DuplicateId(row[0].to_string()));
            }
        }
        Ok(Self(map))
    }
}

/// Path of the ground-truth file that accompanies a manifest CSV.
pub fn truth_path_for(manifest_csv: &Path) -> PathBuf {
    let stem = manifest_csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    manifest_csv.with_file_name(format!("{stem}.truth.csv"))
}

/// Procedural grayscale texture: three sinusoid gratings with random frequency,
/// orientation, phase and amplitude, plus low-amplitude bilinear value noise,
/// min-max normalized and snapped to the 16-bit grid.
pub fn gen_base_image(size: usize, seed: u64) -> Result<ImageRecord> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::invalid(format!(
            "image size {size} < {MIN_IMAGE_SIZE}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let max_cycles = (size as f64 / 6.0).max(2.0);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let cycles = rng.random_range(1.0..max_cycles);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.0);
            let k = std::f64::consts::TAU * cycles / size as f64;
            (k * theta.cos(), k * theta.sin(), phase, amp)
        })
        .collect();

    const CELL: usize = 4;
    const NOISE_AMP: f64 = 0.25;
    let lattice = size / CELL + 2;
    let values: Vec<f64> = (0..lattice * lattice)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v: f64 = gratings
                .iter()
                .map(|&(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).sin())
                .sum();
            let (gx, gy) = (x as f64 / CELL as f64, y as f64 / CELL as f64);
            let (ix, iy) = (gx as usize, gy as usize);
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let at = |i: usize, j: usize| values[j * lattice + i];
            let top = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * fx;
            let bot = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * fx;
            v += NOISE_AMP * (top + (bot - top) * fy);
            px.push(v);
        }
    }
    let (lo, hi) = px
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut px {
        *v = quantize16((*v - lo) / range);
    }
    ImageRecord::new(format!("base{seed:016x}"), size, size, 1, px)
}

/// Index reflection without edge repeat (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn blur(record: &ImageRecord, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (record.width, record.height);
    let mut out = vec![0.0; record.pixels.len()];
    let mut tmp = vec![0.0; w * h];
    for c in 0..record.channels {
        let plane = &record.pixels[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * plane[y * w + reflect(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
        let dst = &mut out[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                    .sum();
                dst[y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Applies one degradation. `seed` drives the noise draw and is ignored by
/// the deterministic kinds. Magnitude 0 returns the input unchanged.
pub fn apply_degradation(record: &ImageRecord, spec: DegradationSpec, seed: u64) -> ImageRecord {
    let m = spec.magnitude;
    if m == 0.0 {
        return record.clone();
    }
    let pixels = match spec.kind {
        DegradationKind::GaussianBlur => blur(record, BLUR_SIGMA_PER_MAGNITUDE * m),
        DegradationKind::AdditiveNoise => {
            let normal = Normal::new(0.0, NOISE_STD_PER_MAGNITUDE * m).expect("positive std");
            let mut rng = rng_from_seed(seed);
            record
                .pixels
                .iter()
                .map(|&p| (p + normal.sample(&mut rng)).clamp(0.0, 1.0))
                .collect()
        }
        DegradationKind::ContrastReduction => {
            let gain = 1.0 - CONTRAST_SHRINK_PER_MAGNITUDE * m;
            record
                .pixels
                .iter()
                .map(|&p| (0.5 + gain * (p - 0.5)).clamp(0.0, 1.0))
                .collect()
        }
    };
    ImageRecord {
        pixels,
        ..record.clone()
    }
}

/// Generates a dataset in memory. Per image `i`, a stream keyed by
/// `"<name>/<i>"` draws, in order: the base-image seed, the magnitude
/// (uniform in `[0, 1)`), the kind index and the noise seed.
pub fn build_biased_dataset(
    config: &BiasedDatasetConfig,
) -> Result<(DatasetManifest, GroundTruth)> {
    config.validate()?;
    let items: Vec<(ImageRecord, f64)> = (0..config.n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(config.seed, &format!("{}/{i}", config.name));
            let base_seed = rng.next_u64();
            let magnitude: f64 = rng.random();
            let kind = config.allowed_kinds[rng.random_range(0..config.allowed_kinds.len())];
            let noise_seed = rng.next_u64();
            let base = gen_base_image(config.image_size, base_seed)?;
            let spec = DegradationSpec::new(kind, magnitude)?;
            let mut img = apply_degradation(&base, spec, noise_seed);
            img.id = format!("{}_{i:05}", config.name);
            img.pixels.iter_mut().for_each(|v| *v = quantize16(*v));
            Ok((img, 1.0 - magnitude))
        })
        .collect::<Result<_>>()?;

    let mut labels = BTreeMap::new();
    let mut truth = BTreeMap::new();
    let mut records = Vec::with_capacity(items.len());
    for (img, q) in items {
        labels.insert(img.id.clone(), config.label_remap.apply(q));
        truth.insert(img.id.clone(), q);
        records.push(Arc::new(img));
    }
    Ok((
        DatasetManifest::new(config.name.clone(), records, labels)?,
        GroundTruth(truth),
    ))
}

/// Paths written by [`gen_biased_dataset`].
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub manifest: DatasetManifest,
    pub truth: GroundTruth,
    pub manifest_path: PathBuf,
    pub truth_path: PathBuf,
}

/// Generates a dataset and writes `<dir>/<name>.csv`, `<dir>/<name>.truth.csv`
/// and the images under `<dir>/<name>/`.
pub fn gen_biased_dataset(config: &BiasedDatasetConfig, dir: &Path) -> Result<GeneratedDataset> {
    let (manifest, truth) = build_biased_dataset(config)?;
    let manifest_path = write_manifest(&manifest, dir)?;
    let truth_path = truth_path_for(&manifest_path);
    truth.write_csv(&truth_path)?;
    Ok(GeneratedDataset {
        manifest,
        truth,
        manifest_path,
        truth_path,
    })
}
