//! Dataset ingestion, synthetic generators and batch assembly.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

/// Images stored as `f32` in `[N, C, H, W]` order with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

/// Summary used to check that reloading a dataset is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub histogram: Vec<usize>,
    pub min_pixel: f32,
    pub max_pixel: f32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn stats(&self) -> DatasetStats {
        let mut histogram = vec![0; self.classes];
        for &l in &self.labels {
            histogram[l] += 1;
        }
        let (min_pixel, max_pixel) =
            self.images.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        DatasetStats { count: self.len(), histogram, min_pixel, max_pixel }
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.images.truncate(n * self.sample_len());
        self.labels.truncate(n);
        self
    }

    /// Averages non-overlapping `factor`×`factor` windows.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::usage(format!(
                "downsample factor {factor} does not divide {}×{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let inv = 1.0 / (factor * factor) as f32;
        let mut images = Vec::with_capacity(self.len() * self.channels * h * w);
        for plane in self.images.chunks_exact(self.height * self.width) {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        let row = &plane[(y * factor + dy) * self.width + x * factor..];
                        s += row[..factor].iter().sum::<f32>();
                    }
                    images.push(s * inv);
                }
            }
        }
        Ok(Self { height: h, width: w, images, ..self.clone() })
    }

    fn check_labels(&self, path: &Path) -> Result<()> {
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.classes) {
            return Err(Error::Validation(vec![format!(
                "{}: label {l} at index {i} is outside [0, {})",
                path.display(),
                self.classes
            )]));
        }
        Ok(())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn idx_payload<'a>(path: &Path, bytes: &'a [u8], magic: u32, dims: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::format(path, format!("file is {} bytes, shorter than the IDX header", bytes.len())));
    }
    let seen = be_u32(bytes, 0);
    if seen != magic {
        return Err(Error::format(path, format!("bad magic 0x{seen:08x}, expected 0x{magic:08x}")));
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let want = shape.iter().product::<usize>();
    let body = &bytes[header..];
    if body.len() != want {
        return Err(Error::format(
            path,
            format!("header {shape:?} declares {want} bytes of data, file holds {}", body.len()),
        ));
    }
    Ok((shape, body))
}

/// Parses an IDX image/label pair (plain or gzipped). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images)?;
    let lbl_bytes = read_maybe_gz(labels)?;
    let (ishape, ibody) = idx_payload(images, &img_bytes, IDX_IMAGES_MAGIC, 3)?;
    let (lshape, lbody) = idx_payload(labels, &lbl_bytes, IDX_LABELS_MAGIC, 1)?;
    if ishape[0] != lshape[0] {
        return Err(Error::format(
            labels,
            format!("{} labels for {} images in {}", lshape[0], ishape[0], images.display()),
        ));
    }
    let ds = Dataset {
        channels: 1,
        height: ishape[1],
        width: ishape[2],
        classes,
        images: ibody.iter().map(|&b| b as f32 / 255.0).collect(),
        labels: lbody.iter().map(|&b| b as usize).collect(),
    };
    ds.check_labels(labels)?;
    Ok(ds)
}

/// Parses CIFAR-10 binary batch files: records of one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn load_cifar10_binary(paths: &[PathBuf]) -> Result<Dataset> {
    let mut ds =
        Dataset { channels: 3, height: 32, width: 32, classes: CIFAR_CLASSES, images: Vec::new(), labels: Vec::new() };
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() {
            return Err(Error::format(path, "empty file: no records"));
        }
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a multiple of the {CIFAR_RECORD}-byte record size", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            ds.labels.push(rec[0] as usize);
            ds.images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
        ds.check_labels(path)?;
    }
    if ds.is_empty() {
        return Err(Error::usage("no CIFAR-10 files given"));
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Well separated clusters; linearly separable.
    Blobs,
    /// Interleaved spiral arms; not linearly separable.
    Spirals,
}

/// 2-D points in `[0, 1]²` with labels.
pub fn synth_points(kind: SynthKind, n: usize, classes: usize, seed: u64) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    if classes < 2 || n < classes {
        return Err(Error::usage(format!("need n ≥ classes ≥ 2, got n={n}, classes={classes}")));
    }
    let mut rng = rng::salted_stream(seed, Stream::Data, kind_tag(kind));
    let mut pts = Vec::with_capacity(n);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let tau = std::f64::consts::TAU;
    match kind {
        SynthKind::Blobs => {
            // Points stay within a radius that keeps the nearest centre unique.
            let ring = 0.35;
            let radius = 0.4 * ring * (std::f64::consts::PI / classes as f64).sin();
            let noise = Normal::new(0.0, radius / 2.0).expect("finite std");
            for &c in &labels {
                let a = tau * c as f64 / classes as f64;
                let centre = [0.5 + ring * a.cos(), 0.5 + ring * a.sin()];
                let off = loop {
                    let o = [noise.sample(&mut rng), noise.sample(&mut rng)];
                    if o[0].hypot(o[1]) < radius {
                        break o;
                    }
                };
                pts.push([centre[0] + off[0], centre[1] + off[1]]);
            }
        }
        SynthKind::Spirals => {
            let noise = Normal::new(0.0, 0.01).expect("finite std");
            for &c in &labels {
                let t: f64 = rng.gen_range(0.05..1.0);
                let a = tau * c as f64 / classes as f64 + 2.0 * tau * t;
                let r = 0.45 * t;
                pts.push([
                    (0.5 + r * a.cos() + noise.sample(&mut rng)).clamp(0.0, 1.0),
                    (0.5 + r * a.sin() + noise.sample(&mut rng)).clamp(0.0, 1.0),
                ]);
            }
        }
    }
    Ok((pts, labels))
}

fn kind_tag(kind: SynthKind) -> &'static str {
    match kind {
        SynthKind::Blobs => "blobs",
        SynthKind::Spirals => "spirals",
    }
}

/// Renders synthetic points as `2 × size × size` images: each channel is a
/// constant plane holding one coordinate.
pub fn synth_generate(kind: SynthKind, n: usize, classes: usize, seed: u64, size: usize) -> Result<Dataset> {
    let (pts, labels) = synth_points(kind, n, classes, seed)?;
    let plane = size * size;
    let mut images = Vec::with_capacity(n * 2 * plane);
    for p in &pts {
        for &coord in p {
            images.extend(std::iter::repeat_n(coord as f32, plane));
        }
    }
    Ok(Dataset { channels: 2, height: size, width: size, classes, images, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar10Binary {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
    Synthetic {
        synth: SynthKind,
        n: usize,
        classes: usize,
        seed: u64,
        #[serde(default = "default_synth_size")]
        size: usize,
        /// Test-split size; defaults to a quarter of `n`.
        #[serde(default)]
        n_test: Option<usize>,
    },
}

fn default_synth_size() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augment {
    #[default]
    None,
    /// Horizontal flip with probability ½.
    Flip,
    /// Random crop from a reflect-padded image, then flip.
    CropFlip { padding: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: Source,
    #[serde(default)]
    pub normalization: Option<Normalization>,
    #[serde(default)]
    pub augment: Augment,
    /// Keep only the first `n` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Average-pool images by this factor after loading.
    #[serde(default)]
    pub downsample: Option<usize>,
    /// Number of classes for IDX sources.
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_classes() -> usize {
    10
}

/// Training and evaluation splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(n) = &self.normalization {
            if n.mean.len() != n.std.len() {
                v.push(format!("normalization has {} means but {} stds", n.mean.len(), n.std.len()));
            }
            if n.std.iter().any(|&s| !(s > 0.0)) {
                v.push("normalization std must be positive".into());
            }
        }
        if let Source::Synthetic { n, classes, size, .. } = self.source {
            if classes < 2 || n < classes {
                v.push(format!("synthetic data needs n ≥ classes ≥ 2, got n={n}, classes={classes}"));
            }
            if size == 0 {
                v.push("synthetic image size must be positive".into());
            }
        }
        if self.downsample == Some(0) {
            v.push("downsample factor must be positive".into());
        }
        v
    }

    /// Loads both splits. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Splits> {
        let v = self.violations();
        if !v.is_empty() {
            return Err(Error::Validation(v));
        }
        let at = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let (mut train, mut test) = match &self.source {
            Source::Idx { train_images, train_labels, test_images, test_labels } => (
                load_idx(&at(train_images), &at(train_labels), self.classes)?,
                load_idx(&at(test_images), &at(test_labels), self.classes)?,
            ),
            Source::Cifar10Binary { train, test } => (
                load_cifar10_binary(&train.iter().map(at).collect::<Vec<_>>())?,
                load_cifar10_binary(&test.iter().map(at).collect::<Vec<_>>())?,
            ),
            &Source::Synthetic { synth, n, classes, seed, size, n_test } => {
                let n_test = n_test.unwrap_or((n / 4).max(classes));
                (
                    synth_generate(synth, n, classes, seed, size)?,
                    synth_generate(synth, n_test, classes, rng::derive_seed(seed, Stream::Data, "test"), size)?,
                )
            }
        };
        if let Some(n) = self.train_limit {
            train = train.truncate(n);
        }
        if let Some(n) = self.test_limit {
            test = test.truncate(n);
        }
        if let Some(f) = self.downsample {
            train = train.downsample(f)?;
            test = test.downsample(f)?;
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != train.channels {
                return Err(Error::Validation(vec![format!(
                    "normalization has {} channels, data has {}",
                    n.mean.len(),
                    train.channels
                )]));
            }
        }
        Ok(Splits { train, test })
    }
}

/// Deterministic batch assembly: shuffling, augmentation, normalization.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub normalization: Option<Normalization>,
    pub augment: Augment,
}

impl Pipeline {
    pub fn from_spec(spec: &DatasetSpec) -> Self {
        Self { normalization: spec.normalization.clone(), augment: spec.augment }
    }

    /// Order of one training epoch, drawn from the shuffle stream.
    pub fn epoch_order(n: usize, shuffle: &mut impl Rng) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(shuffle);
        order
    }

    /// Training batch: augmentation (if any) then normalization.
    pub fn train_batch<T: Element>(
        &self,
        ds: &Dataset,
        idx: &[usize],
        augment: &mut impl Rng,
    ) -> (Tensor<T>, Vec<usize>) {
        self.assemble(ds, idx, Some(augment))
    }

    /// Evaluation batch: normalization only.
    pub fn eval_batch<T: Element>(&self, ds: &Dataset, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        self.assemble::<T, rand_chacha::ChaCha8Rng>(ds, idx, None)
    }

    fn assemble<T: Element, R: Rng>(
        &self,
        ds: &Dataset,
        idx: &[usize],
        mut augment: Option<&mut R>,
    ) -> (Tensor<T>, Vec<usize>) {
        let (c, h, w) = (ds.channels, ds.height, ds.width);
        let mut data = Vec::with_capacity(idx.len() * ds.sample_len());
        let mut scratch = vec![0f32; ds.sample_len()];
        for &i in idx {
            let img = ds.image(i);
            let src: &[f32] = match (&mut augment, self.augment) {
                (Some(rng), Augment::Flip) => {
                    let flip = rng.gen_bool(0.5);
                    crop_flip(img, &mut scratch, c, h, w, 0, (0, 0), flip);
                    &scratch
                }
                (Some(rng), Augment::CropFlip { padding }) => {
                    let dy = rng.gen_range(0..=2 * padding);
                    let dx = rng.gen_range(0..=2 * padding);
                    let flip = rng.gen_bool(0.5);
                    crop_flip(img, &mut scratch, c, h, w, padding, (dy, dx), flip);
                    &scratch
                }
                _ => img,
            };
            match &self.normalization {
                Some(n) => {
                    for (ch, plane) in src.chunks_exact(h * w).enumerate() {
                        let (m, s) = (n.mean[ch], n.std[ch]);
                        data.extend(plane.iter().map(|&p| T::from_f64(((p - m) / s) as f64)));
                    }
                }
                None => data.extend(src.iter().map(|&p| T::from_f64(p as f64))),
            }
        }
        let labels = idx.iter().map(|&i| ds.labels[i]).collect();
        (Tensor::new(&[idx.len(), c, h, w], data).expect("batch shape"), labels)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Crop at offset `(dy, dx)` of the image reflect-padded by `pad`, optionally
/// mirrored horizontally.
#[allow(clippy::too_many_arguments)]
fn crop_flip(src: &[f32], dst: &mut [f32], c: usize, h: usize, w: usize, pad: usize, off: (usize, usize), flip: bool) {
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = reflect(y as isize + off.0 as isize - pad as isize, h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = reflect(xx as isize + off.1 as isize - pad as isize, w);
                dst[ch * h * w + y * w + x] = plane[sy * w + sx];
            }
        }
    }
}
