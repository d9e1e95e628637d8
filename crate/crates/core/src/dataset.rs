//! Image and label ingestion, label rescaling, train/test splitting and patch
//! extraction.
//!
//! Pixels are stored planar (channel-major, then row-major) as `f64` in
//! `[0, 1]`: the value of channel `c` at `(x, y)` lives at
//! `pixels[(c * height + y) * width + x]`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        let bad = |reason: String| Error::InvalidRecord {
            id: id.clone(),
            reason,
        };
        if channels != 1 && channels != 3 {
            return Err(bad(format!("{channels} channels (expected 1 or 3)")));
        }
        if width == 0 || height == 0 {
            return Err(bad("empty image".into()));
        }
        if pixels.len() != width * height * channels {
            return Err(bad(format!(
                "{} pixel values for {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(bad(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            id,
            width,
            height,
            channels,
            pixels,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// Decodes a PNG (8 or 16 bit, gray or RGB), scaling by the bit depth maximum.
    pub fn read_png(id: impl Into<String>, path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, interleaved): (usize, Vec<f64>) = match img {
            DynamicImage::ImageLuma8(b) => {
                (1, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
            }
            DynamicImage::ImageLuma16(b) => (
                1,
                b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
            ),
            DynamicImage::ImageRgb8(b) => {
                (3, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
            }
            DynamicImage::ImageRgb16(b) => (
                3,
                b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
            ),
            other => {
                return Err(Error::InvalidRecord {
                    id: id.into(),
                    reason: format!("unsupported pixel format {:?}", other.color()),
                })
            }
        };
        let mut pixels = vec![0.0; interleaved.len()];
        for (i, v) in interleaved.into_iter().enumerate() {
            let (p, c) = (i / channels, i % channels);
            pixels[c * w * h + p] = v;
        }
        Self::new(id, w, h, channels, pixels)
    }

    /// Writes a 16-bit PNG. Values are quantized with [`quantize16`], so a
    /// record that is already on the 16-bit grid round-trips exactly.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let plane = self.width * self.height;
        let q = |v: f64| (v * 65535.0).round() as u16;
        let res = if self.channels == 1 {
            let raw: Vec<u16> = self.pixels.iter().map(|&v| q(v)).collect();
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw)
                .expect("buffer size matches dimensions")
                .save(path)
        } else {
            let mut raw = Vec::with_capacity(plane * 3);
            for p in 0..plane {
                for c in 0..3 {
                    raw.push(q(self.pixels[c * plane + p]));
                }
            }
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, raw)
                .expect("buffer size matches dimensions")
                .save(path)
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Snaps a value in `[0, 1]` onto the 16-bit grid used by [`ImageRecord::write_png`].
#[inline]
pub fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// A named set of images with one raw quality label each, plus the min-max
/// rescaled labels once [`rescale_mos`] has run.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub name: String,
    records: Vec<Arc<ImageRecord>>,
    index: HashMap<String, usize>,
    labels: BTreeMap<String, f64>,
    rescaled: Option<BTreeMap<String, f64>>,
}

impl DatasetManifest {
    pub fn new(
        name: impl Into<String>,
        records: Vec<Arc<ImageRecord>>,
        labels: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let name = name.into();
        if records.is_empty() {
            return Err(Error::EmptyManifest(name));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            match labels.get(&r.id) {
                Some(v) if v.is_finite() => {}
                Some(v) => {
                    return Err(Error::InvalidRecord {
                        id: r.id.clone(),
                        reason: format!("non-finite label {v}"),
                    })
                }
                None => {
                    return Err(Error::InvalidRecord {
                        id: r.id.clone(),
                        reason: "no label".into(),
                    })
                }
            }
        }
        if labels.len() != records.len() {
            let stray = labels.keys().find(|k| !index.contains_key(*k)).unwrap();
            return Err(Error::InvalidRecord {
                id: stray.clone(),
                reason: "label without image".into(),
            });
        }
        Ok(Self {
            name,
            records,
            index,
            labels,
            rescaled: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Arc<ImageRecord>] {
        &self.records
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn record(&self, id: &str) -> Option<&Arc<ImageRecord>> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn raw_label(&self, id: &str) -> Option<f64> {
        self.labels.get(id).copied()
    }

    pub fn labels(&self) -> &BTreeMap<String, f64> {
        &self.labels
    }

    pub fn rescaled(&self) -> Option<&BTreeMap<String, f64>> {
        self.rescaled.as_ref()
    }

    /// The rescaled label when available, otherwise the raw one.
    pub fn target(&self, id: &str) -> Option<f64> {
        match &self.rescaled {
            Some(m) => m.get(id).copied(),
            None => self.raw_label(id),
        }
    }
}

/// Reads a manifest CSV with header `id,image_path,mos`. Image paths are
/// resolved relative to the directory holding the CSV.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "image_path", "mos"] {
        return Err(Error::InvalidArgument(format!(
            "{}: expected header id,image_path,mos, found {}",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut records = Vec::new();
    let mut labels = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let id = row[0].to_string();
        let mos: f64 = row[2].parse().map_err(|_| Error::InvalidRecord {
            id: id.clone(),
            reason: format!("mos {:?} is not a number", &row[2]),
        })?;
        if labels.insert(id.clone(), mos).is_some() {
            return Err(Error::DuplicateId(id));
        }
        let img_path: PathBuf = base.join(&row[1]);
        records.push(Arc::new(ImageRecord::read_png(id, &img_path)?));
    }
    DatasetManifest::new(name, records, labels)
}

/// Writes `<dir>/<name>.csv` plus one PNG per record under `<dir>/<name>/`.
/// Returns the CSV path.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join(&manifest.name);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let csv_path = dir.join(format!("{}.csv", manifest.name));
    let mut out = String::from("id,image_path,mos\n");
    for r in manifest.records() {
        let rel = format!("{}/{}.png", manifest.name, r.id);
        r.write_png(&dir.join(&rel))?;
        out.push_str(&format!("{},{},{}\n", r.id, rel, manifest.labels[&r.id]));
    }
    fs::write(&csv_path, out).map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv_path)
}

/// Per-dataset min-max rescaling of raw labels onto `[0, 1]`.
pub fn rescale_mos(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    let (lo, hi) = manifest
        .labels
        .values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if lo >= hi {
        return Err(Error::DegenerateLabels(manifest.labels.len()));
    }
    let range = hi - lo;
    let rescaled = manifest
        .labels
        .iter()
        .map(|(k, &v)| {
            let r = if v == hi { 1.0 } else { (v - lo) / range };
            (k.clone(), r)
        })
        .collect();
    let mut out = manifest.clone();
    out.rescaled = Some(rescaled);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Split {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub fraction: f64,
}

/// Sorts ids lexicographically, Fisher-Yates shuffles them with `seed`, and
/// takes the first `round(fraction * N)` as the training side.
pub fn split_dataset(manifest: &DatasetManifest, seed: u64, fraction: f64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction {fraction} not in (0, 1)"
        )));
    }
    let mut ids: Vec<String> = manifest.ids().map(str::to_string).collect();
    ids.sort();
    let n = ids.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "splitting {n} records at fraction {fraction} leaves one side empty"
        )));
    }
    let mut rng = rng_from_seed(seed);
    ids.shuffle(&mut rng);
    let test_ids = ids.split_off(n_train);
    Ok(Split {
        train_ids: ids,
        test_ids,
        seed,
        fraction,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// Planar `channels x size x size`.
    pub pixels: Vec<f64>,
    pub size: usize,
    pub channels: usize,
    pub source_id: String,
    pub flipped: bool,
}

impl Patch {
    /// Copies the `size x size` window with top-left corner `(x0, y0)`.
    pub fn crop(record: &ImageRecord, x0: usize, y0: usize, size: usize, flip: bool) -> Self {
        let mut pixels = Vec::with_capacity(record.channels * size * size);
        for c in 0..record.channels {
            for y in 0..size {
                let row = (c * record.height + y0 + y) * record.width + x0;
                let src = &record.pixels[row..row + size];
                if flip {
                    pixels.extend(src.iter().rev());
                } else {
                    pixels.extend_from_slice(src);
                }
            }
        }
        Self {
            pixels,
            size,
            channels: record.channels,
            source_id: record.id.clone(),
            flipped: flip,
        }
    }
}

fn check_fits(record: &ImageRecord, size: usize) -> Result<()> {
    if size == 0 || record.width < size || record.height < size {
        return Err(Error::ImageTooSmall {
            id: record.id.clone(),
            width: record.width,
            height: record.height,
            size,
        });
    }
    Ok(())
}

/// Draws `n` random `size x size` patches.
///
/// For each patch, in order: `x = rng.random_range(0..=width - size)`, then
/// `y = rng.random_range(0..=height - size)`, then, only when `allow_flip`,
/// `flip = rng.random_bool(0.5)`.
pub fn sample_patches(
    record: &ImageRecord,
    n: usize,
    size: usize,
    allow_flip: bool,
    rng: &mut Rng,
) -> Result<Vec<Patch>> {
    check_fits(record, size)?;
    Ok((0..n)
        .map(|_| {
            let x = rng.random_range(0..=record.width - size);
            let y = rng.random_range(0..=record.height - size);
            let flip = allow_flip && rng.random_bool(0.5);
            Patch::crop(record, x, y, size, flip)
        })
        .collect())
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(record: &ImageRecord, new_w: usize, new_h: usize) -> ImageRecord {
    // (index, next index, fraction) per output coordinate
    fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    }
    let tx = taps(record.width, new_w);
    let ty = taps(record.height, new_h);
    let mut pixels = Vec::with_capacity(record.channels * new_w * new_h);
    let mut row0 = vec![0.0; new_w];
    let mut row1 = vec![0.0; new_w];
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    for c in 0..record.channels {
        for &(y0, y1, fy) in &ty {
            for (o, &(x0, x1, fx)) in tx.iter().enumerate() {
                row0[o] = lerp(record.at(c, y0, x0), record.at(c, y0, x1), fx);
                row1[o] = lerp(record.at(c, y1, x0), record.at(c, y1, x1), fx);
            }
            pixels.extend(row0.iter().zip(&row1).map(|(&a, &b)| lerp(a, b, fy)));
        }
    }
    ImageRecord {
        id: record.id.clone(),
        width: new_w,
        height: new_h,
        channels: record.channels,
        pixels,
    }
}

/// Resizes so the shorter side equals `short_side` (the other side rounded to
/// the nearest integer), then takes the central `crop x crop` window. With an
/// odd margin the extra row or column is left at the bottom or right.
pub fn resize_short_side_and_center_crop(
    record: &ImageRecord,
    short_side: usize,
    crop: usize,
) -> Result<Patch> {
    if crop == 0 || crop > short_side {
        return Err(Error::invalid(format!(
            "crop {crop} must be in 1..={short_side} (the short side)"
        )));
    }
    let (w, h) = (record.width as f64, record.height as f64);
    let (new_w, new_h) = if record.width <= record.height {
        (
            short_side,
            ((h * short_side as f64 / w).round() as usize).max(short_side),
        )
    } else {
        (
            ((w * short_side as f64 / h).round() as usize).max(short_side),
            short_side,
        )
    };
    let resized = if (new_w, new_h) == (record.width, record.height) {
        record.clone()
    } else {
        resize_bilinear(record, new_w, new_h)
    };
    let x0 = (new_w - crop) / 2;
    let y0 = (new_h - crop) / 2;
    Ok(Patch::crop(&resized, x0, y0, crop, false))
}
