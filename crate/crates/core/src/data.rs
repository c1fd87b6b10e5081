//! Datasets: the PDTS binary format, synthetic generators, search split and
//! per-channel normalization.
//!
//! PDTS layout, all integers little-endian:
//!
//! ```text
//! "PDTS" | version u16 | images u32 | classes u32 | height u32 | width u32 | channels u32
//! labels: u8 x images
//! pixels: u8 x images*channels*height*width   (image-major, then channel, row, column)
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};

pub const MAGIC: &[u8; 4] = b"PDTS";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 5 * 4;

/// Images as stored on disk: u8 labels and pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    pub classes: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        (self.channels * self.height * self.width) as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.labels.len() + self.pixels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.labels.len() as u32, self.classes, self.height, self.width, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, DatasetError> {
        let take = |offset: usize, needed: usize, what: &'static str| {
            bytes.get(offset..offset + needed).ok_or(DatasetError::Truncated {
                what,
                offset,
                needed,
                available: bytes.len(),
            })
        };
        let magic = take(0, 4, "magic")?;
        if magic != MAGIC {
            return Err(DatasetError::BadMagic { found: magic.to_vec() });
        }
        let version = u16::from_le_bytes(take(4, 2, "version")?.try_into().expect("two bytes"));
        if version != FORMAT_VERSION {
            return Err(DatasetError::UnsupportedVersion { version });
        }
        let names = ["images", "classes", "height", "width", "channels"];
        let mut counts = [0u32; 5];
        for (k, name) in names.into_iter().enumerate() {
            let b = take(6 + 4 * k, 4, name)?;
            counts[k] = u32::from_le_bytes(b.try_into().expect("four bytes"));
        }
        let [images, classes, height, width, channels] = counts;
        if classes > 256 {
            return Err(DatasetError::Header {
                field: "classes",
                value: classes as u64,
            });
        }
        let n = images as usize;
        let labels = take(HEADER_LEN, n, "labels")?.to_vec();
        let image_len = channels as u64 * height as u64 * width as u64;
        let pixel_len = n as u64 * image_len;
        if pixel_len > usize::MAX as u64 / 2 {
            return Err(DatasetError::Header {
                field: "images",
                value: images as u64,
            });
        }
        let pix_off = HEADER_LEN + n;
        let pixels = take(pix_off, pixel_len as usize, "pixels")?.to_vec();
        let end = pix_off + pixel_len as usize;
        if bytes.len() > end {
            return Err(DatasetError::TrailingBytes {
                offset: end,
                extra: bytes.len() - end,
            });
        }
        if let Some(index) = labels.iter().position(|&l| l as u32 >= classes) {
            return Err(DatasetError::LabelOutOfRange {
                index,
                offset: HEADER_LEN + index,
                label: labels[index],
                classes,
            });
        }
        Ok(RawDataset {
            classes,
            height,
            width,
            channels,
            labels,
            pixels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Images as `f64`, `[N, C, H, W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Pixels scaled to `[0, 1]`.
    pub fn from_raw(raw: &RawDataset) -> Self {
        Dataset {
            classes: raw.classes as usize,
            channels: raw.channels as usize,
            height: raw.height as usize,
            width: raw.width as usize,
            images: raw.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            labels: raw.labels.iter().map(|&l| l as usize).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        (vec![indices.len(), self.channels, self.height, self.width], data, labels)
    }

    pub fn normalize(&mut self, norm: &Normalization) {
        let plane = self.height * self.width;
        let n = self.image_len().max(1);
        for img in self.images.chunks_mut(n) {
            for (c, ch) in img.chunks_mut(plane.max(1)).enumerate() {
                for v in ch {
                    *v = (*v - norm.mean[c]) / norm.std[c];
                }
            }
        }
    }
}

/// Per-channel statistics used to standardize inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(data: &Dataset) -> Self {
        let plane = data.height * data.width;
        let count = (data.len() * plane).max(1) as f64;
        let mut mean = vec![0.0; data.channels];
        let mut sq = vec![0.0; data.channels];
        for i in 0..data.len() {
            for (c, ch) in data.image(i).chunks(plane.max(1)).enumerate() {
                for v in ch {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Normalization { mean, std }
    }
}

/// The two halves of the training set used by the search: weights train on
/// `a`, architecture parameters on `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSplit {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// Stratified half split: each class's indices are shuffled and dealt
/// alternately to the two halves, continuing the alternation across classes.
pub fn search_split(labels: &[usize], seed: u64) -> SearchSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut turn = 0usize;
    for k in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            if turn.is_multiple_of(2) {
                a.push(i);
            } else {
                b.push(i);
            }
            turn += 1;
        }
    }
    a.sort_unstable();
    b.sort_unstable();
    SearchSplit { a, b }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Class is a geometric figure drawn over a random background with noise.
    Shapes,
    /// Class is read off the mean brightness; spatial content is noise.
    Shortcut,
}

impl Generator {
    pub fn capacity(self) -> usize {
        match self {
            Generator::Shapes => 8,
            Generator::Shortcut => 8,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "shapes" => Some(Generator::Shapes),
            "shortcut" => Some(Generator::Shortcut),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub count: usize,
}

/// Deterministic labeled images; labels are balanced to within one sample.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<RawDataset> {
    if spec.classes == 0 || spec.classes > spec.generator.capacity() {
        return Err(Error::config(format!(
            "generator {:?} supports 1..={} classes, got {}",
            spec.generator,
            spec.generator.capacity(),
            spec.classes
        )));
    }
    if spec.image_size < 4 || spec.channels == 0 {
        return Err(Error::config("synthetic images need size >= 4 and at least one channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..spec.count).map(|i| (i % spec.classes) as u8).collect();
    labels.shuffle(&mut rng);
    let s = spec.image_size;
    let mut pixels = Vec::with_capacity(spec.count * spec.channels * s * s);
    for &label in &labels {
        let img = match spec.generator {
            Generator::Shapes => draw_shape(&mut rng, label as usize, s, spec.channels),
            Generator::Shortcut => draw_shortcut(&mut rng, label as usize, spec.classes, s, spec.channels),
        };
        pixels.extend(img.into_iter().map(quantize));
    }
    Ok(RawDataset {
        classes: spec.classes as u32,
        height: s as u32,
        width: s as u32,
        channels: spec.channels as u32,
        labels,
        pixels,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn inside_shape(label: usize, dx: f64, dy: f64, r: f64) -> bool {
    let t = r / 3.0;
    match label {
        0 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        1 => dx * dx + dy * dy <= r * r,
        2 => dy.abs() <= t && dx.abs() <= r,
        3 => dx.abs() <= t && dy.abs() <= r,
        4 => (dy.abs() <= t && dx.abs() <= r) || (dx.abs() <= t && dy.abs() <= r),
        5 => (dx - dy).abs() <= t && dx.abs() <= r,
        6 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }
        _ => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

fn draw_shape(rng: &mut ChaCha8Rng, label: usize, s: usize, channels: usize) -> Vec<f64> {
    let sf = s as f64;
    let cx = sf / 2.0 - 0.5 + rng.random_range(-sf / 8.0..=sf / 8.0);
    let cy = sf / 2.0 - 0.5 + rng.random_range(-sf / 8.0..=sf / 8.0);
    let r = rng.random_range(sf / 4.0..=sf / 3.0);
    let bg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..0.4)).collect();
    let fg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.6..1.0)).collect();
    let noise = Normal::new(0.0, 0.08).expect("positive std");
    let mut out = Vec::with_capacity(channels * s * s);
    for c in 0..channels {
        for y in 0..s {
            for x in 0..s {
                let on = inside_shape(label, x as f64 - cx, y as f64 - cy, r);
                let base = if on { fg[c] } else { bg[c] };
                out.push(base + noise.sample(rng));
            }
        }
    }
    out
}

fn draw_shortcut(rng: &mut ChaCha8Rng, label: usize, classes: usize, s: usize, channels: usize) -> Vec<f64> {
    let band = 0.7 / classes as f64;
    let target = 0.15 + band * (label as f64 + 0.5) + rng.random_range(-0.25..=0.25) * band;
    let noise = Normal::new(0.0, 0.03).expect("positive std");
    // A random oriented ramp plus a random bump, all zero-mean after centering.
    let (gx, gy) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
    let (bx, by) = (rng.random_range(0.0..s as f64), rng.random_range(0.0..s as f64));
    let amp = rng.random_range(0.05..0.12);
    let mut out = Vec::with_capacity(channels * s * s);
    for _ in 0..channels {
        for y in 0..s {
            for x in 0..s {
                let (u, v) = (x as f64 / s as f64 - 0.5, y as f64 / s as f64 - 0.5);
                let d2 = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (s as f64).powi(2);
                out.push(amp * (gx * u + gy * v) + amp * (-8.0 * d2).exp() + noise.sample(rng));
            }
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.iter().map(|v| v - mean + target).collect()
}

/// Train and test sets after normalization, plus what the manifest records.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
    /// SHA-256 of the PDTS encodings of the train and test sets.
    pub digests: (String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// A generator name ("shapes", "shortcut") or the path of a PDTS file.
    pub source: String,
    /// PDTS test file, required when `source` is a path.
    #[serde(default)]
    pub test_source: Option<String>,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub train: usize,
    pub test: usize,
}

impl DatasetSpec {
    pub fn desk(generator: &str) -> Self {
        DatasetSpec {
            source: generator.to_string(),
            test_source: None,
            classes: 4,
            image_size: 16,
            channels: 3,
            train: 256,
            test: 128,
        }
    }

    /// Generates or reads both splits and standardizes them with the
    /// statistics of the training set.
    pub fn load(&self, seed: u64) -> Result<LoadedData> {
        let (train, test) = match Generator::parse(&self.source) {
            Some(generator) => {
                let spec = |count| SyntheticSpec {
                    generator,
                    classes: self.classes,
                    image_size: self.image_size,
                    channels: self.channels,
                    count,
                };
                (
                    generate_synthetic(&spec(self.train), crate::seed::derive(seed, "data.train", 0))?,
                    generate_synthetic(&spec(self.test), crate::seed::derive(seed, "data.test", 0))?,
                )
            }
            None => {
                let test = self
                    .test_source
                    .as_ref()
                    .ok_or_else(|| Error::config("a file dataset needs `test_source`"))?;
                (RawDataset::read(Path::new(&self.source))?, RawDataset::read(Path::new(test))?)
            }
        };
        if train.channels != test.channels || train.height != test.height || train.width != test.width {
            return Err(Error::config("train and test images differ in geometry"));
        }
        let digest = |r: &RawDataset| crate::run::sha256_hex(&r.to_bytes());
        let digests = (digest(&train), digest(&test));
        let mut train = Dataset::from_raw(&train);
        let mut test = Dataset::from_raw(&test);
        let normalization = Normalization::fit(&train);
        train.normalize(&normalization);
        test.normalize(&normalization);
        Ok(LoadedData {
            train,
            test,
            normalization,
            digests,
        })
    }
}
