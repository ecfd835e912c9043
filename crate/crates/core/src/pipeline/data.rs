//! CIFAR-10 binary ingestion, channel statistics, and a procedural stand-in dataset
//! written in the same binary layout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::augment::Image;
use crate::error::{bail, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Element, Tensor};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = SIDE * SIDE * CHANNELS;
pub const RECORD: usize = 1 + PIXELS;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation of `[0, 1]` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats { mean: [0.0; 3], std: [1.0; 3] }
    }

    pub fn approx_eq(&self, other: &ChannelStats, tol: f64) -> bool {
        (0..3).all(|c| (self.mean[c] - other.mean[c]).abs() <= tol && (self.std[c] - other.std[c]).abs() <= tol)
    }
}

/// Images are HWC `f32` in `[0, 1]`, stored back to back.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
    /// Normalization to apply when batching; recorded, never baked into `images`.
    pub normalization: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if labels.is_empty() {
            bail!(Input, "dataset is empty");
        }
        if images.len() != labels.len() * PIXELS {
            bail!(Dimension, "{} pixel values for {} labels", images.len(), labels.len());
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            bail!(Format, "label {} out of range", l);
        }
        Ok(Dataset { images, labels, split, normalization: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn image(&self, i: usize) -> Image {
        Image { height: SIDE, width: SIDE, channels: CHANNELS, data: self.pixels(i).to_vec() }
    }

    /// The first `n` records (all of them when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len()).max(1);
        Dataset {
            images: self.images[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
            normalization: self.normalization,
        }
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for px in self.images.chunks(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let n = (self.images.len() / 3) as f64;
        let mut stats = ChannelStats::identity();
        for c in 0..3 {
            stats.mean[c] = sum[c] / n;
            stats.std[c] = (sq[c] / n - stats.mean[c] * stats.mean[c]).max(1e-12).sqrt();
        }
        stats
    }
}

/// Stacks images into a normalized `[batch, H, W, C]` tensor.
pub fn normalize_batch<T: Element>(images: &[Image], stats: &ChannelStats) -> Result<Tensor<T>> {
    let Some(first) = images.first() else { bail!(Degenerate, "empty batch") };
    let (h, w, c) = (first.height, first.width, first.channels);
    if c != 3 {
        bail!(Dimension, "expected RGB images, got {} channels", c);
    }
    let mut out = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            bail!(Dimension, "batch images differ in size");
        }
        for px in img.data.chunks(3) {
            for ch in 0..3 {
                out.push(T::lit((px[ch] as f64 - stats.mean[ch]) / stats.std[ch]));
            }
        }
    }
    Tensor::new(&[images.len(), h, w, c], out)
}

fn decode_records(bytes: &[u8], origin: &Path) -> Result<(Vec<f32>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        bail!(Format, "{}: {} bytes is not a whole number of {}-byte records", origin.display(), bytes.len(), RECORD);
    }
    let n = bytes.len() / RECORD;
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks(RECORD).enumerate() {
        let label = rec[0];
        if label as usize >= NUM_CLASSES {
            bail!(Format, "{}: record {} has label {}", origin.display(), r, label);
        }
        labels.push(label);
        let planes = &rec[1..];
        for p in 0..SIDE * SIDE {
            for c in 0..CHANNELS {
                images.push(planes[c * SIDE * SIDE + p] as f32 / 255.0);
            }
        }
    }
    Ok((images, labels))
}

/// Reads one CIFAR-10 binary batch file.
pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let (images, labels) = decode_records(&bytes, path)?;
    Dataset::new(images, labels, split)
}

/// Reads the train batches or the test batch from a CIFAR-10 binary directory.
pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => TRAIN_FILES.iter().map(|f| dir.join(f)).filter(|p| p.exists()).collect(),
        Split::Test => vec![dir.join(TEST_FILE)],
    };
    if files.is_empty() || !files[0].exists() {
        bail!(Input, "no CIFAR-10 {:?} batches under {}", split, dir.display());
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = fs::read(f)?;
        let (i, l) = decode_records(&bytes, f)?;
        images.extend(i);
        labels.extend(l);
    }
    Dataset::new(images, labels, split)
}

/// Encodes images back into CIFAR-10 records (pixels rounded to bytes).
pub fn encode_records(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.len() * RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        let px = ds.pixels(i);
        for c in 0..CHANNELS {
            for p in 0..SIDE * SIDE {
                out.push((px[p * CHANNELS + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn draw_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]
}

fn distinct_colors<R: Rng>(rng: &mut R) -> ([f32; 3], [f32; 3]) {
    loop {
        let a = draw_color(rng);
        let b = draw_color(rng);
        let d: f32 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        if d > 0.6 {
            return (a, b);
        }
    }
}

/// Soft two-level step: 1 where `s > 0`, 0 where `s < 0`, about a pixel wide.
fn soft_step(s: f32) -> f32 {
    (0.5 + 1.5 * s).clamp(0.0, 1.0)
}

/// Texture coverage of class `class` at rotated coordinates `(u, v)`; `period` is in
/// pixels and `field` holds the random orientations and phases of the blob class.
fn class_pattern(class: usize, u: f32, v: f32, period: f32, field: &[(f32, f32, f32); 3]) -> f32 {
    use std::f32::consts::{FRAC_1_SQRT_2, PI, TAU};
    let w = TAU / period;
    match class {
        0 => soft_step((u * w).sin()),
        1 => soft_step((v * w).sin()),
        2 => soft_step(((u + v) * FRAC_1_SQRT_2 * w).sin()),
        3 => soft_step(((u - v) * FRAC_1_SQRT_2 * w).sin()),
        4 => soft_step((u * w).sin() * (v * w).sin() * 2.0),
        5 => {
            let (fu, fv) = ((u / period).rem_euclid(1.0) - 0.5, (v / period).rem_euclid(1.0) - 0.5);
            soft_step((0.3 - (fu * fu + fv * fv).sqrt()) * period * 0.7)
        }
        6 => soft_step(((u * u + v * v).sqrt() * w).sin()),
        7 => soft_step((u * w * 2.2).sin()),
        8 => {
            let s: f32 = field.iter().map(|(a, ph, f)| ((u * a.cos() + v * a.sin()) * f + ph).cos()).sum();
            soft_step(s * 0.8)
        }
        _ => {
            let line = |t: f32| ((t * w * 0.5).sin().abs() < 0.35) as u8 as f32;
            line(u).max(line(v + PI))
        }
    }
}

/// One procedural image of `class`: a texture (gratings at four orientations, a fine
/// grating, checkers, dots, rings, blobs, a grid) rendered in two random colors with
/// random orientation jitter, period, phase, shading and pixel noise. Class identity
/// is carried by local structure only; color and position carry none.
pub fn synthetic_image<R: Rng>(class: usize, rng: &mut R) -> Vec<f32> {
    let (bg, fg) = distinct_colors(rng);
    let shade = draw_color(rng);
    let angle = rng.gen_range(-0.2f32..0.2);
    let period = rng.gen_range(5.0f32..8.0);
    let (ou, ov) = (rng.gen_range(0.0f32..32.0), rng.gen_range(0.0f32..32.0));
    let field = [0, 1, 2].map(|_| {
        (rng.gen_range(0.0f32..std::f32::consts::PI), rng.gen_range(0.0f32..std::f32::consts::TAU), rng.gen_range(0.35f32..0.7))
    });
    let grad_dir = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let noise = rng.gen_range(0.02f32..0.08);
    let (sa, ca) = angle.sin_cos();
    let (cx, cy) = if class == 6 { (rng.gen_range(8.0f32..24.0), rng.gen_range(8.0f32..24.0)) } else { (16.0, 16.0) };
    let mut out = Vec::with_capacity(PIXELS);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let (mut u, mut v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
            if class != 6 {
                u += ou;
                v += ov;
            }
            let t = 0.5 + 0.5 * ((x as f32 * grad_dir.cos() + y as f32 * grad_dir.sin()) / SIDE as f32);
            let p = class_pattern(class, u, v, period, &field);
            for c in 0..CHANNELS {
                let base = fg[c] * p + bg[c] * (1.0 - p);
                let shaded = base * (1.0 - 0.3 * t) + shade[c] * 0.3 * t;
                let n: f32 = rng.sample::<f32, _>(StandardNormal) * noise;
                out.push((shaded + n).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Deterministic procedural dataset; labels are drawn uniformly per image.
pub fn synthetic_dataset(n: usize, seed: u64, split: Split) -> Result<Dataset> {
    let tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(seed, Stream::Synthetic, &[tag, i as u64]);
        let class = rng.gen_range(0..NUM_CLASSES);
        labels.push(class as u8);
        images.extend(synthetic_image(class, &mut rng));
    }
    let mut ds = Dataset::new(images, labels, split)?;
    // Round through bytes so in-memory and on-disk copies agree exactly.
    let (images, labels) = decode_records(&encode_records(&ds), Path::new("<synthetic>"))?;
    ds.images = images;
    ds.labels = labels;
    Ok(ds)
}

/// Writes a procedural dataset as CIFAR-10 binary files (`n_train` spread over the
/// five train batches, `n_test` in the test batch).
pub fn write_synthetic_cifar(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let train = synthetic_dataset(n_train, seed, Split::Train)?;
    let per = n_train.div_ceil(TRAIN_FILES.len());
    let bytes = encode_records(&train);
    for (k, name) in TRAIN_FILES.iter().enumerate() {
        let lo = (k * per).min(n_train) * RECORD;
        let hi = ((k + 1) * per).min(n_train) * RECORD;
        if lo == hi {
            continue;
        }
        fs::File::create(dir.join(name))?.write_all(&bytes[lo..hi])?;
    }
    let test = synthetic_dataset(n_test, seed, Split::Test)?;
    fs::File::create(dir.join(TEST_FILE))?.write_all(&encode_records(&test))?;
    Ok(())
}
