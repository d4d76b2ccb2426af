//! Synthetic small-organ phantoms: ellipse "organs" in three size tiers on a
//! noisy background, written as raw rasters plus a JSON manifest.
//!
//! Everything is a pure function of the spec seed through the SplitMix64
//! counter generator (per-sample substreams), so the same spec reproduces
//! identical bytes anywhere. Foreground stays under 15% of each image by
//! budget-clamping organ axes; small organs are drawn first so their size
//! distribution is never clamped.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeTier {
    Large,
    Mid,
    Small,
}

impl SizeTier {
    /// Semi-axis range in pixels.
    pub fn radius_range(self) -> (f64, f64) {
        match self {
            SizeTier::Large => (20.0, 30.0),
            SizeTier::Mid => (8.0, 14.0),
            SizeTier::Small => (2.0, 5.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeTier::Large => "large",
            SizeTier::Mid => "mid",
            SizeTier::Small => "small",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub tier: SizeTier,
    pub intensity_mean: f64,
    pub intensity_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Square image size.
    pub size: usize,
    pub classes: Vec<ClassSpec>,
    pub background_mean: f64,
    pub background_sigma: f64,
    /// Number of images.
    pub count: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let c = |name: &str, tier, mean| ClassSpec {
            name: name.into(),
            tier,
            intensity_mean: mean,
            intensity_sigma: 0.03,
        };
        PhantomSpec {
            size: 128,
            classes: vec![
                c("cortex", SizeTier::Large, 0.30),
                c("thalamus", SizeTier::Mid, 0.48),
                c("putamen", SizeTier::Mid, 0.66),
                c("cochlea_l", SizeTier::Small, 0.92),
                c("cochlea_r", SizeTier::Small, 0.79),
                c("optic_nerve", SizeTier::Small, 0.56),
            ],
            background_mean: 0.08,
            background_sigma: 0.03,
            count: 16,
            seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 || self.size % 32 != 0 {
            return Err(Error::Config(format!("phantom size {} must be a positive multiple of 32", self.size)));
        }
        if self.classes.is_empty() || self.classes.len() > 255 {
            return Err(Error::Config("need 1..=255 phantom classes".into()));
        }
        if !self.classes.iter().any(|c| c.tier == SizeTier::Small) {
            return Err(Error::Config("at least one small-tier class is required".into()));
        }
        if self.count == 0 {
            return Err(Error::Config("phantom count must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Manifest ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestClass {
    pub name: String,
    pub tier: SizeTier,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: usize,
    pub image: String,
    pub label: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub classes: Vec<ManifestClass>,
    pub samples: Vec<ManifestSample>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Check every referenced raster exists with the exact byte length.
    pub fn validate_files(&self, dir: &Path) -> Result<()> {
        for s in &self.samples {
            for (path, want) in [
                (dir.join(&s.image), s.channels * s.height * s.width * 4),
                (dir.join(&s.label), s.height * s.width),
            ] {
                let meta = fs::metadata(&path)
                    .map_err(|_| Error::Dataset(format!("missing file {}", path.display())))?;
                if meta.len() != want as u64 {
                    return Err(Error::Dataset(format!(
                        "{}: expected {} bytes, found {}",
                        path.display(),
                        want,
                        meta.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── Raster I/O ──────────────────────────────────────────────────────

/// Little-endian f32 raster, row-major.
pub fn write_image(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image(path: &Path, expect_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|_| Error::Dataset(format!("missing file {}", path.display())))?;
    if bytes.len() != expect_len * 4 {
        return Err(Error::Dataset(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect_len * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_labels(path: &Path, data: &[u8]) -> Result<()> {
    fs::write(path, data)?;
    Ok(())
}

pub fn read_labels(path: &Path, expect_len: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|_| Error::Dataset(format!("missing file {}", path.display())))?;
    if bytes.len() != expect_len {
        return Err(Error::Dataset(format!(
            "{}: expected {expect_len} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// One decoded sample: intensity image [1, H, W] plus label map.
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

pub fn read_sample(dir: &Path, manifest: &DatasetManifest, id: usize) -> Result<Sample> {
    let s = manifest
        .samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Dataset(format!("sample id {id} not in manifest")))?;
    let img = read_image(&dir.join(&s.image), s.channels * s.height * s.width)?;
    let labels = read_labels(&dir.join(&s.label), s.height * s.width)?;
    Ok(Sample {
        image: Tensor::from_vec(&[s.channels, s.height, s.width], img)?,
        labels,
        height: s.height,
        width: s.width,
    })
}

// ── Generation ──────────────────────────────────────────────────────

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Foreground area budget: organs may cover at most this fraction of the
/// image, leaving margin below the 15% invariant for rasterization slack.
const FG_BUDGET: f64 = 0.125;
const PLACEMENT_ATTEMPTS: usize = 100;

struct GeneratedSample {
    image: Vec<f32>,
    labels: Vec<u8>,
    notes: Vec<String>,
}

fn generate_one(spec: &PhantomSpec, sample_id: usize) -> GeneratedSample {
    let s = spec.size;
    let mut rng = CounterRng::substream(spec.seed, sample_id as u64);

    // Background first, organs painted over it.
    let mut image: Vec<f32> = (0..s * s)
        .map(|_| (spec.background_mean + spec.background_sigma * rng.normal()).clamp(0.0, 1.0) as f32)
        .collect();
    let mut labels = vec![0u8; s * s];
    let mut notes = Vec::new();

    // Every class appears in >= 60% of images: class c sits out only the
    // images with index ≡ phase_c (mod 5), and only when there are at least
    // five images.
    let skip_phase: Vec<u64> = (0..spec.classes.len())
        .map(|c| crate::rng::splitmix(spec.seed, 1000 + c as u64) % 5)
        .collect();

    // Small organs first so the area budget clamps only the big ones.
    let mut order: Vec<usize> = (0..spec.classes.len()).collect();
    order.sort_by_key(|&c| {
        (
            match spec.classes[c].tier {
                SizeTier::Small => 0,
                SizeTier::Mid => 1,
                SizeTier::Large => 2,
            },
            c,
        )
    });

    let budget = FG_BUDGET * (s * s) as f64;
    let mut used_area = 0.0f64;
    for &c in &order {
        let class = &spec.classes[c];
        if spec.count >= 5 && sample_id as u64 % 5 == skip_phase[c] {
            continue;
        }
        let (lo, hi) = class.tier.radius_range();
        let mut a = rng.uniform(lo, hi);
        let mut b = rng.uniform(lo, hi);
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let remaining = budget - used_area;
        let area = std::f64::consts::PI * a * b;
        if area > remaining {
            let shrink = (remaining / area).max(0.0).sqrt();
            a *= shrink;
            b *= shrink;
            if a < 1.5 || b < 1.5 {
                notes.push(format!("sample {sample_id}: skipped {} (area budget)", class.name));
                continue;
            }
        }
        let margin = a.max(b) + 2.0;
        if 2.0 * margin >= s as f64 {
            notes.push(format!("sample {sample_id}: skipped {} (too big for image)", class.name));
            continue;
        }
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cx = rng.uniform(margin, s as f64 - margin);
            let cy = rng.uniform(margin, s as f64 - margin);
            let ell = Ellipse { cx, cy, a, b, cos_t: theta.cos(), sin_t: theta.sin() };
            let x0 = (cx - margin).floor().max(0.0) as usize;
            let x1 = ((cx + margin).ceil() as usize).min(s - 1);
            let y0 = (cy - margin).floor().max(0.0) as usize;
            let y1 = ((cy + margin).ceil() as usize).min(s - 1);
            let mut pixels = Vec::new();
            let mut overlap = false;
            'scan: for y in y0..=y1 {
                for x in x0..=x1 {
                    if ell.contains(x as f64, y as f64) {
                        if labels[y * s + x] != 0 {
                            overlap = true;
                            break 'scan;
                        }
                        pixels.push(y * s + x);
                    }
                }
            }
            if overlap || pixels.is_empty() {
                continue;
            }
            for &p in &pixels {
                labels[p] = (c + 1) as u8;
                image[p] = (class.intensity_mean + class.intensity_sigma * rng.normal()).clamp(0.0, 1.0) as f32;
            }
            used_area += pixels.len() as f64;
            placed = true;
            break;
        }
        if !placed {
            notes.push(format!("sample {sample_id}: skipped {} (placement)", class.name));
        }
    }
    GeneratedSample { image, labels, notes }
}

/// Generate the dataset on disk and return the manifest (also written to
/// `dir/manifest.json`).
pub fn gen_phantom(spec: &PhantomSpec, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(spec.count);
    let mut notes = Vec::new();
    for id in 0..spec.count {
        let g = generate_one(spec, id);
        let image_name = format!("img_{id:04}.f32");
        let label_name = format!("lbl_{id:04}.u8");
        write_image(&dir.join(&image_name), &g.image)?;
        write_labels(&dir.join(&label_name), &g.labels)?;
        notes.extend(g.notes);
        samples.push(ManifestSample {
            id,
            image: image_name,
            label: label_name,
            height: spec.size,
            width: spec.size,
            channels: 1,
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        classes: spec
            .classes
            .iter()
            .map(|c| ManifestClass { name: c.name.clone(), tier: c.tier })
            .collect(),
        samples,
        notes,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

// ── Preprocessing ───────────────────────────────────────────────────

/// Stack the image with a 2x-then-back and a 0.5x-then-back resampled copy,
/// giving a three-channel input: [original, up-down, down-up].
pub fn preprocess_trick(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.shape().len() != 3 || image.shape()[0] != 1 {
        return Err(Error::invalid("preprocess_trick", format!("need [1,h,w], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let up_down = image.resize_bilinear(2 * h, 2 * w)?.resize_bilinear(h, w)?;
    let down_up = image
        .resize_bilinear((h / 2).max(1), (w / 2).max(1))?
        .resize_bilinear(h, w)?;
    Tensor::concat(&[image.clone(), up_down, down_up], 0)
}

/// Plain channel replication for the no-trick path.
pub fn replicate3(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.shape().len() != 3 || image.shape()[0] != 1 {
        return Err(Error::invalid("replicate3", format!("need [1,h,w], got {:?}", image.shape())));
    }
    Tensor::concat(&[image.clone(), image.clone(), image.clone()], 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(count: usize, seed: u64) -> PhantomSpec {
        PhantomSpec { count, seed, ..PhantomSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_one(&small_spec(4, 3), 2);
        let b = generate_one(&small_spec(4, 3), 2);
        assert_eq!(a.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn labels_stay_in_range_and_fg_below_cap() {
        for seed in 0..8 {
            let spec = small_spec(3, seed);
            for id in 0..3 {
                let g = generate_one(&spec, id);
                let n = spec.classes.len() as u8;
                assert!(g.labels.iter().all(|&v| v <= n));
                let fg = g.labels.iter().filter(|&&v| v > 0).count() as f64;
                let frac = fg / (spec.size * spec.size) as f64;
                assert!(frac < 0.15, "seed {seed} id {id}: fg fraction {frac}");
            }
        }
    }

    #[test]
    fn every_class_appears_in_at_least_60_percent() {
        let spec = small_spec(20, 11);
        let mut present = vec![0usize; spec.classes.len()];
        for id in 0..spec.count {
            let g = generate_one(&spec, id);
            for c in 0..spec.classes.len() {
                if g.labels.iter().any(|&v| v as usize == c + 1) {
                    present[c] += 1;
                }
            }
        }
        for (c, &n) in present.iter().enumerate() {
            assert!(
                n as f64 >= 0.6 * spec.count as f64,
                "class {c} present in {n}/{} images",
                spec.count
            );
        }
    }

    #[test]
    fn small_tier_areas_match_ellipse_area() {
        // Over many seeds, small-organ pixel counts stay within ±30% of
        // π·a·b for the sampled radius range [2,5].
        let lo = std::f64::consts::PI * 4.0 * 0.7;
        let hi = std::f64::consts::PI * 25.0 * 1.3;
        let mut checked = 0;
        for seed in 0..40 {
            let spec = small_spec(1, 100 + seed);
            let g = generate_one(&spec, 0);
            for (c, class) in spec.classes.iter().enumerate() {
                if class.tier != SizeTier::Small {
                    continue;
                }
                let area = g.labels.iter().filter(|&&v| v as usize == c + 1).count();
                if area == 0 {
                    continue; // skipped by placement this draw
                }
                checked += 1;
                assert!(
                    (area as f64) >= lo && (area as f64) <= hi,
                    "seed {seed} class {c}: area {area} outside [{lo:.1}, {hi:.1}]"
                );
            }
        }
        assert!(checked > 50, "too few small organs checked: {checked}");
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(3, 5);
        let manifest = gen_phantom(&spec, dir.path()).unwrap();
        manifest.validate_files(dir.path()).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 3);
        assert_eq!(loaded.classes.len(), 6);

        // corrupt one file → explicit length error
        std::fs::write(dir.path().join(&loaded.samples[0].image), b"short").unwrap();
        assert!(loaded.validate_files(dir.path()).is_err());
    }

    #[test]
    fn sample_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(2, 9);
        let manifest = gen_phantom(&spec, dir.path()).unwrap();
        let s = read_sample(dir.path(), &manifest, 1).unwrap();
        let direct = generate_one(&spec, 1);
        assert_eq!(
            s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            direct.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(s.labels, direct.labels);
        assert!(read_sample(dir.path(), &manifest, 99).is_err());
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = DatasetManifest { version: 1, classes: vec![], samples: vec![], notes: vec![] };
        let dir = tempfile::tempdir().unwrap();
        m.validate_files(dir.path()).unwrap();
    }

    #[test]
    fn trick_keeps_original_channel_and_constants() {
        let c = Tensor::from_vec(&[1, 32, 32], vec![0.4f32; 1024]).unwrap();
        let out = preprocess_trick(&c).unwrap();
        assert_eq!(out.shape(), &[3, 32, 32]);
        for &v in out.data() {
            assert_eq!(v, 0.4); // constants are fixed points of both resamplings
        }

        let mut rng = CounterRng::new(2);
        let noisy: Vec<f32> = (0..1024).map(|_| rng.next_f64() as f32).collect();
        let img = Tensor::from_vec(&[1, 32, 32], noisy.clone()).unwrap();
        let out = preprocess_trick(&img).unwrap();
        assert_eq!(&out.data()[..1024], &noisy[..]); // channel 1 bitwise
    }

    #[test]
    fn trick_channel3_smooths_noise() {
        // down-up resampling is low-pass: variance drops on white noise
        let mut passed = 0;
        for seed in 0..20 {
            let mut rng = CounterRng::new(seed);
            let noisy: Vec<f32> = (0..4096).map(|_| rng.next_f64() as f32).collect();
            let img = Tensor::from_vec(&[1, 64, 64], noisy).unwrap();
            let out = preprocess_trick(&img).unwrap();
            let var = |xs: &[f32]| {
                let m = xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len() as f64;
                xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / xs.len() as f64
            };
            if var(&out.data()[2 * 4096..]) <= var(&out.data()[..4096]) {
                passed += 1;
            }
        }
        assert_eq!(passed, 20);
    }

    #[test]
    fn trick_commutes_with_horizontal_flip() {
        let mut rng = CounterRng::new(4);
        let (h, w) = (32, 32);
        let data: Vec<f32> = (0..h * w).map(|_| rng.next_f64() as f32).collect();
        let img = Tensor::from_vec(&[1, h, w], data.clone()).unwrap();
        let flip = |t: &Tensor<f32>| {
            let c = t.shape()[0];
            let mut out = vec![0.0f32; t.numel()];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[(ch * h + y) * w + x] = t.data()[(ch * h + y) * w + (w - 1 - x)];
                    }
                }
            }
            Tensor::from_vec(t.shape(), out).unwrap()
        };
        let a = preprocess_trick(&flip(&img)).unwrap();
        let b = flip(&preprocess_trick(&img).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
