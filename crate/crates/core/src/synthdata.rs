//! Seeded ultrasound-like phantoms with exact ground truth for the four
//! bone classes.
//!
//! Randomness is counter based: every random number is a hash of the seed,
//! a stream tag and an index, so the value at a pixel never depends on the
//! order in which pixels are generated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evalmetrics::dilate_contour;
use crate::imagecore::{
    sample_filename, write_labels, write_sample, Image2D, LabeledSample, Spacing, DEFAULT_SPACING_MM, NUM_CLASSES,
};

/// Mean background echo before speckle.
pub const BACKGROUND_LEVEL: f64 = 0.3;
/// Width of the dilated ground-truth band.
pub const GT_DILATION_MM: f64 = 1.0;
/// Share of a dataset assigned to training.
pub const TRAIN_FRACTION: f64 = 0.8;

// The class geometries are laid out for this nominal depth band and then
// mapped linearly onto the requested one.
const NOMINAL_DEPTH: (f64, f64) = (0.45, 0.75);

const STREAM_SPECKLE: u64 = 1;
const STREAM_GEOMETRY: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub class_id: u8,
    pub size: usize,
    pub seed: u64,
    pub speckle_sigma: f64,
    pub surface_brightness: f64,
    pub shadow_attenuation: f64,
    pub surface_blur_px: f64,
    /// Shallowest and deepest surface depth as fractions of the image height.
    pub depth_range: (f64, f64),
    pub spacing_mm: f64,
}

impl PhantomSpec {
    pub fn new(class_id: u8, seed: u64) -> Self {
        PhantomSpec {
            class_id,
            size: 64,
            seed,
            speckle_sigma: 0.25,
            surface_brightness: 0.9,
            shadow_attenuation: 0.15,
            surface_blur_px: 1.0,
            depth_range: NOMINAL_DEPTH,
            spacing_mm: DEFAULT_SPACING_MM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Phantom(m));
        if self.class_id as usize >= NUM_CLASSES {
            return fail(format!("class id {} out of range", self.class_id));
        }
        if self.size < 32 {
            return fail(format!("size {} below the 32 pixel minimum", self.size));
        }
        let (lo, hi) = self.depth_range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return fail(format!("depth range ({lo}, {hi}) must satisfy 0 < lo < hi < 1"));
        }
        if !(0.0 < self.shadow_attenuation && self.shadow_attenuation < 1.0) {
            return fail("shadow attenuation must lie in (0, 1)".into());
        }
        if !(self.speckle_sigma >= 0.0) || !(self.surface_brightness > 0.0) || !(self.surface_blur_px > 0.0) {
            return fail("speckle must be non-negative, brightness and blur positive".into());
        }
        if !(self.spacing_mm > 0.0) {
            return fail("pixel spacing must be positive".into());
        }
        Ok(())
    }
}

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64 random bits for `(seed, stream, counter)`.
pub fn counter_hash(seed: u64, stream: u64, counter: u64) -> u64 {
    let key = splitmix_finalize(seed ^ splitmix_finalize(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    splitmix_finalize(key.wrapping_add(counter.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Uniform in `[0, 1)`.
pub fn counter_uniform(seed: u64, stream: u64, counter: u64) -> f64 {
    (counter_hash(seed, stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller on counters `2i` and `2i + 1`.
pub fn counter_normal(seed: u64, stream: u64, i: u64) -> f64 {
    let u1 = 1.0 - counter_uniform(seed, stream, 2 * i);
    let u2 = counter_uniform(seed, stream, 2 * i + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Surface depth (fraction of height) as a function of the lateral
/// position `u` in `[0, 1]`, before mapping onto the requested depth band.
fn nominal_profile(class_id: u8, seed: u64, u: f64) -> f64 {
    let g = |k: u64| counter_uniform(seed, STREAM_GEOMETRY, k);
    let jitter = 0.015 * (2.0 * g(0) - 1.0);
    let scale = 0.85 + 0.3 * g(1);
    match class_id {
        // two adjacent convex arcs
        0 => {
            let v = if u < 0.5 { (u - 0.25) / 0.25 } else { (u - 0.75) / 0.25 };
            0.62 + jitter - 0.12 * scale * (1.0 - v * v)
        }
        // one deep convex arc
        1 => {
            let v = 2.0 * u - 1.0;
            0.72 + jitter - 0.08 * scale * (1.0 - v * v)
        }
        // shallow line with a smooth step down
        2 => {
            let at = 0.35 + 0.3 * g(2);
            0.46 + jitter + 0.05 * scale / (1.0 + (-(u - at) / 0.03).exp())
        }
        // straight line with a constant slope of random sign
        _ => {
            let sign = if g(3) < 0.5 { -1.0 } else { 1.0 };
            0.6 + jitter + sign * 0.1 * scale * (u - 0.5)
        }
    }
}

/// Surface row (sub-pixel) for every column.
pub fn surface_rows(spec: &PhantomSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.size;
    let (lo, hi) = spec.depth_range;
    let (nlo, nhi) = NOMINAL_DEPTH;
    let rows: Vec<f64> = (0..n)
        .map(|c| {
            let u = c as f64 / (n - 1) as f64;
            let f = lo + (nominal_profile(spec.class_id, spec.seed, u) - nlo) / (nhi - nlo) * (hi - lo);
            f * n as f64
        })
        .collect();
    if rows.iter().any(|&r| !(r >= 1.0 && r <= n as f64 - 2.0)) {
        return Err(Error::Phantom("surface leaves the image".into()));
    }
    Ok(rows)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<LabeledSample> {
    let depth = surface_rows(spec)?;
    let n = spec.size;
    let spacing = Spacing::isotropic(spec.spacing_mm)?;
    let blur = spec.surface_blur_px;
    let image = Image2D::from_fn(n, n, spacing, |r, c| {
        let d = depth[c];
        let rf = r as f64;
        let noise = counter_normal(spec.seed, STREAM_SPECKLE, (r * n + c) as u64);
        let speckle = BACKGROUND_LEVEL * (1.0 + spec.speckle_sigma * noise);
        // smooth transition into the acoustic shadow just below the ridge
        let t = 1.0 / (1.0 + (-(rf - d - 2.0 * blur) / blur).exp());
        let shadowed = speckle * (1.0 - t * (1.0 - spec.shadow_attenuation));
        let ridge = spec.surface_brightness * (-(rf - d).powi(2) / (2.0 * blur * blur)).exp();
        shadowed.max(ridge).clamp(0.0, 1.0)
    });
    let contour: Vec<(usize, usize)> = depth
        .iter()
        .enumerate()
        .map(|(c, &d)| (d.round() as usize, c))
        .collect();
    let mask = dilate_contour(&contour, GT_DILATION_MM, spacing, n, n);
    LabeledSample::new(image, contour, mask, spec.class_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub filename: String,
    pub class_id: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub path: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("filename,class_id,split\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.filename, e.class_id, e.split.as_str());
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("filename,class_id,split") {
            return Err(Error::Format("manifest header must be filename,class_id,split".into()));
        }
        let entries = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let parts: Vec<&str> = l.split(',').map(str::trim).collect();
                let [name, class, split] = parts[..] else {
                    return Err(Error::Format(format!("bad manifest line {l:?}")));
                };
                let class_id: u8 = class
                    .parse()
                    .ok()
                    .filter(|&c: &u8| (c as usize) < NUM_CLASSES)
                    .ok_or_else(|| Error::Format(format!("bad class in manifest line {l:?}")))?;
                let split = match split {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    _ => return Err(Error::Format(format!("bad split in manifest line {l:?}"))),
                };
                Ok(ManifestEntry {
                    filename: name.to_string(),
                    class_id,
                    split,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest { entries, path: None })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m = DatasetManifest::parse_csv(&text)?;
        m.path = Some(path);
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Class of the `index`-th phantom: round robin, so classes stay balanced.
pub fn class_for_index(index: usize) -> u8 {
    (index % NUM_CLASSES) as u8
}

/// Exact 80/20 split: indices ordered by a seeded hash, the first
/// `round(0.8 * count)` go to training.
pub fn split_assignment(count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| (counter_hash(seed, STREAM_SPLIT, i as u64), i));
    let n_train = (count as f64 * TRAIN_FRACTION).round() as usize;
    let mut split = vec![Split::Test; count];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    split
}

/// Phantom specs of a dataset: class round robin, seed `seed + index`.
pub fn dataset_specs(count: usize, size: usize, seed: u64) -> Vec<PhantomSpec> {
    (0..count)
        .map(|i| PhantomSpec {
            size,
            ..PhantomSpec::new(class_for_index(i), seed.wrapping_add(i as u64))
        })
        .collect()
}

/// Generates a dataset in memory together with its split.
pub fn generate_samples(count: usize, size: usize, seed: u64) -> Result<(Vec<LabeledSample>, Vec<Split>)> {
    if count < NUM_CLASSES {
        return Err(Error::Config(format!("need at least {NUM_CLASSES} phantoms, got {count}")));
    }
    let samples = dataset_specs(count, size, seed)
        .par_iter()
        .map(generate_phantom)
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, split_assignment(count, seed)))
}

/// Writes `images/`, `masks/`, `labels.csv` and `manifest.csv` under
/// `out_dir`.
pub fn generate_dataset(count: usize, size: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let (samples, splits) = generate_samples(count, size, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<ManifestEntry> = (0..count)
        .map(|i| ManifestEntry {
            filename: sample_filename(i),
            class_id: samples[i].class_id,
            split: splits[i],
        })
        .collect();
    entries
        .par_iter()
        .zip(samples.par_iter())
        .try_for_each(|(e, s)| write_sample(out_dir, &e.filename, s))?;
    let labels: Vec<(String, u8)> = entries.iter().map(|e| (e.filename.clone(), e.class_id)).collect();
    write_labels(out_dir, &labels)?;
    let manifest = DatasetManifest {
        entries,
        path: Some(out_dir.join("manifest.csv")),
    };
    let path = out_dir.join("manifest.csv");
    fs::write(&path, manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
