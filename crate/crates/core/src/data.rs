//! Datasets, IDX files, synthetic digits, input corruptions and label noise.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store;
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with pixels in `[0, 1]` and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(format!("images must be NCHW, got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::format(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::format(format!("label {bad} outside 0..{classes}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// The first `n` samples (all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.image_shape().to_vec(), self.images.row(i).to_vec())
    }
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| Error::format(format!("{what}: truncated header")))
}

/// Parses an IDX image file into `[N, 1, H, W]` pixels in `[0, 1]`.
pub fn parse_idx_images(image_bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(image_bytes, 0, "image file")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(image_bytes, 4, "image file")? as usize;
    let h = read_u32(image_bytes, 8, "image file")? as usize;
    let w = read_u32(image_bytes, 12, "image file")? as usize;
    let payload = &image_bytes[16..];
    let expected = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format("image dimensions overflow"))?;
    if payload.len() != expected {
        return Err(Error::format(format!(
            "image payload has {} bytes, dimensions need {expected}",
            payload.len()
        )));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format("empty IDX file"));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Parses IDX image and label files; pixels are rescaled to `[0, 1]`.
///
/// Image files hold unsigned bytes with dimensions `(N, H, W)`; the class
/// count is one more than the largest label.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let images = parse_idx_images(image_bytes)?;
    let n = images.rows();
    let magic = read_u32(label_bytes, 0, "label file")?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(format!("bad label magic {magic:#010x}")));
    }
    let m = read_u32(label_bytes, 4, "label file")? as usize;
    let labels = &label_bytes[8..];
    if labels.len() != m {
        return Err(Error::format(format!(
            "label payload has {} bytes, header says {m}",
            labels.len()
        )));
    }
    if m != n {
        return Err(Error::format(format!("{n} images but {m} labels")));
    }
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(images, labels, classes)
}

/// Serializes a single-channel dataset to IDX image and label bytes,
/// rounding pixels to the nearest of 256 levels.
pub fn write_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let &[n, c, h, w] = ds.images.shape() else { unreachable!() };
    if c != 1 {
        return Err(Error::invalid("IDX export supports single-channel images only"));
    }
    if ds.labels.iter().any(|&y| y > 255) {
        return Err(Error::invalid("IDX labels must fit in one byte"));
    }
    let mut images = Vec::with_capacity(16 + n * h * w);
    for v in [IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + n);
    for v in [LABEL_MAGIC, n as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(ds.labels.iter().map(|&y| y as u8));
    Ok((images, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

pub fn idx_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let (i, l) = split.file_names();
    (dir.join(i), dir.join(l))
}

/// Loads a split stored under the conventional MNIST file names.
pub fn load_idx_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (ip, lp) = idx_paths(dir, split);
    parse_idx(&fs::read(ip)?, &fs::read(lp)?)
}

pub fn save_idx_dir(dir: &Path, split: Split, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (ip, lp) = idx_paths(dir, split);
    let (images, labels) = write_idx(ds)?;
    fs::write(ip, images)?;
    fs::write(lp, labels)?;
    Ok(())
}

// 64-bit mixing used to derive independent streams from tuples of keys
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn keyed_rng(keys: &[u64]) -> ChaCha8Rng {
    let seed = keys.iter().fold(0x5EED_u64, |acc, &k| splitmix(acc ^ splitmix(k)));
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    /// Parameter at severities 1 through 5.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ImpulseNoise => [0.01, 0.03, 0.06, 0.10, 0.17],
            CorruptionKind::GaussianBlur => [0.5, 1.0, 1.5, 2.0, 2.5],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.2],
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
        }
    }

    fn id(self) -> u64 {
        self as u64 + 1
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind `{s}`")))
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::GaussianBlur => "gaussian-blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 0 is the identity, 5 the strongest.
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if severity > 5 {
            return Err(Error::invalid(format!("severity must be 0..=5, got {severity}")));
        }
        Ok(CorruptionSpec { kind, severity, seed })
    }

    /// Parses `kind:severity`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let (kind, sev) = text
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("expected kind:severity, got `{text}`")))?;
        let severity = sev
            .parse()
            .map_err(|_| Error::invalid(format!("bad severity `{sev}`")))?;
        Self::new(kind.parse()?, severity, seed)
    }

    pub fn parameter(&self) -> Option<f64> {
        (self.severity > 0).then(|| self.kind.table()[self.severity as usize - 1])
    }
}

/// Applies a corruption to one `[C, H, W]` image; `index` identifies the
/// sample so the random draw is reproducible per image.
pub fn apply_corruption(image: &Tensor, spec: &CorruptionSpec, index: u64) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("corruption needs a CHW image, got {:?}", image.shape())));
    };
    if spec.severity > 5 {
        return Err(Error::invalid(format!("severity must be 0..=5, got {}", spec.severity)));
    }
    let Some(p) = spec.parameter() else {
        return Ok(image.clone());
    };
    let mut rng = keyed_rng(&[spec.seed, index, spec.kind.id(), spec.severity as u64]);
    let x = image.data();
    let data: Vec<f64> = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, p).expect("finite std");
            x.iter().map(|&v| v + normal.sample(&mut rng)).collect()
        }
        CorruptionKind::ImpulseNoise => x
            .iter()
            .map(|&v| {
                if rng.random::<f64>() < p {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::GaussianBlur => x
            .chunks_exact(h * w)
            .flat_map(|plane| gaussian_blur(plane, h, w, p))
            .collect(),
        CorruptionKind::Contrast => x
            .chunks_exact(h * w)
            .flat_map(|plane| {
                let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                plane.iter().map(move |&v| (v - mean) * p + mean)
            })
            .collect(),
        CorruptionKind::Brightness => x.iter().map(|&v| v + p).collect(),
    };
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(vec![c, h, w], data)
}

fn gaussian_blur(plane: &[f64], h: usize, w: usize, std: f64) -> Vec<f64> {
    let radius = (3.0 * std).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * std * std)).exp())
        .collect();
    // edge handling renormalizes the truncated kernel
    let pass = |src: &[f64], len: usize, stride: usize, count: usize, step: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            for i in 0..len as isize {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &kv) in kernel.iter().enumerate() {
                    let j = i + k as isize - radius;
                    if (0..len as isize).contains(&j) {
                        acc += kv * src[line * step + j as usize * stride];
                        norm += kv;
                    }
                }
                out[line * step + i as usize * stride] = acc / norm;
            }
        }
        out
    };
    let rows = pass(plane, w, 1, h, w);
    pass(&rows, h, w, w, 1)
}

/// Corrupts every image of a dataset, keyed by sample index.
pub fn corrupt_dataset(ds: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let mut data = Vec::with_capacity(ds.images.len());
    for i in 0..ds.len() {
        data.extend_from_slice(apply_corruption(&ds.image(i), spec, i as u64)?.data());
    }
    Ok(Dataset {
        images: Tensor::new(ds.images.shape().to_vec(), data)?,
        labels: ds.labels.clone(),
        classes: ds.classes,
    })
}

/// The full suite of kinds at severities 1 through 5.
pub fn corruption_suite(seed: u64) -> Vec<CorruptionSpec> {
    CorruptionKind::ALL
        .into_iter()
        .flat_map(|kind| (1..=5).map(move |severity| CorruptionSpec { kind, severity, seed }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SuiteEntry {
    spec: CorruptionSpec,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SuiteManifest {
    classes: usize,
    labels: Vec<usize>,
    entries: Vec<SuiteEntry>,
}

/// Writes corrupted copies of `ds` as raw tensors plus `manifest.json`.
pub fn save_corrupted_suite(dir: &Path, ds: &Dataset, specs: &[CorruptionSpec]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let corrupted = corrupt_dataset(ds, spec)?;
        let file = format!("{}-{}.f64", spec.kind, spec.severity);
        store::write_tensor(&dir.join(&file), &corrupted.images)?;
        entries.push(SuiteEntry {
            spec: *spec,
            file,
            shape: corrupted.images.shape().to_vec(),
        });
    }
    let manifest = SuiteManifest {
        classes: ds.classes,
        labels: ds.labels.clone(),
        entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a suite written by [`save_corrupted_suite`].
pub fn load_corrupted_suite(dir: &Path) -> Result<Vec<(CorruptionSpec, Dataset)>> {
    let manifest: SuiteManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    manifest
        .entries
        .into_iter()
        .map(|e| {
            let images = store::read_tensor(&dir.join(&e.file), &e.shape)?;
            Ok((e.spec, Dataset::new(images, manifest.labels.clone(), manifest.classes)?))
        })
        .collect()
}

/// Training set with a fraction of labels replaced by wrong ones.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySplit {
    /// All samples with the corrupted labels in place.
    pub dataset: Dataset,
    pub original_labels: Vec<usize>,
    /// Indices whose label is unchanged.
    pub clean: Vec<usize>,
    /// Indices whose label was replaced.
    pub noisy: Vec<usize>,
}

impl NoisySplit {
    pub fn clean_subset(&self) -> Dataset {
        self.dataset.subset(&self.clean)
    }

    pub fn noisy_subset(&self) -> Dataset {
        self.dataset.subset(&self.noisy)
    }
}

/// Relabels `floor(fraction * N)` uniformly chosen samples with a class
/// drawn uniformly from the other classes.
pub fn inject_label_noise(ds: &Dataset, fraction: f64, seed: u64) -> Result<NoisySplit> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("noise fraction must lie in [0, 1], got {fraction}")));
    }
    let n = ds.len();
    let count = (fraction * n as f64).floor() as usize;
    if count > 0 && ds.classes < 2 {
        return Err(Error::invalid("label noise needs at least two classes"));
    }
    let mut rng = keyed_rng(&[seed, 0x1abe1]);
    let mut noisy = index::sample(&mut rng, n, count).into_vec();
    noisy.sort_unstable();
    let mut labels = ds.labels.clone();
    for &i in &noisy {
        let r = rng.random_range(0..ds.classes - 1);
        labels[i] = if r < labels[i] { r } else { r + 1 };
    }
    let mut is_noisy = vec![false; n];
    noisy.iter().for_each(|&i| is_noisy[i] = true);
    let clean = (0..n).filter(|&i| !is_noisy[i]).collect();
    Ok(NoisySplit {
        dataset: Dataset {
            images: ds.images.clone(),
            labels,
            classes: ds.classes,
        },
        original_labels: ds.labels.clone(),
        clean,
        noisy,
    })
}

/// Stroke skeletons of the ten digits in a unit box, y pointing down.
fn digit_strokes(d: usize) -> Vec<Vec<(f64, f64)>> {
    let arc = |cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64| -> Vec<(f64, f64)> {
        let n = 14;
        (0..=n)
            .map(|i| {
                let t = (a0 + (a1 - a0) * i as f64 / n as f64).to_radians();
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect()
    };
    match d {
        0 => vec![arc(0.5, 0.5, 0.26, 0.37, 0.0, 360.0)],
        1 => vec![vec![(0.36, 0.26), (0.52, 0.12), (0.52, 0.88)]],
        2 => {
            let mut top = arc(0.5, 0.33, 0.24, 0.2, 190.0, 370.0);
            top.extend([(0.26, 0.88), (0.78, 0.88)]);
            vec![top]
        }
        3 => vec![
            arc(0.48, 0.3, 0.23, 0.18, 200.0, 450.0),
            arc(0.48, 0.67, 0.26, 0.21, 270.0, 520.0),
        ],
        4 => vec![vec![(0.64, 0.88), (0.64, 0.12), (0.22, 0.64), (0.82, 0.64)]],
        5 => {
            let mut s = vec![(0.74, 0.12), (0.32, 0.12), (0.29, 0.46)];
            s.extend(arc(0.48, 0.64, 0.25, 0.23, 220.0, 500.0));
            vec![s]
        }
        6 => {
            let mut s = arc(0.62, 0.5, 0.32, 0.38, 250.0, 180.0);
            s.extend(arc(0.5, 0.68, 0.21, 0.2, 180.0, 540.0));
            vec![s]
        }
        7 => vec![vec![(0.22, 0.12), (0.78, 0.12), (0.42, 0.88)]],
        8 => vec![
            arc(0.5, 0.3, 0.2, 0.18, 0.0, 360.0),
            arc(0.5, 0.68, 0.24, 0.2, 0.0, 360.0),
        ],
        9 => {
            let mut s = arc(0.5, 0.32, 0.21, 0.2, 0.0, 360.0);
            s.extend([(0.7, 0.58), (0.64, 0.88)]);
            vec![s]
        }
        _ => unreachable!("digits are 0..=9"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one jittered digit as a 28x28 image quantized to 256 levels.
pub fn render_digit<R: Rng + ?Sized>(digit: usize, rng: &mut R) -> Vec<f64> {
    const SIZE: usize = 28;
    let angle: f64 = rng.random_range(-0.35..0.35);
    let scale: f64 = rng.random_range(0.75..1.15);
    let aspect: f64 = rng.random_range(0.8..1.2);
    let shear: f64 = rng.random_range(-0.3..0.3);
    let (tx, ty): (f64, f64) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let width: f64 = rng.random_range(0.03..0.065);
    let ink: f64 = rng.random_range(0.55..1.0);
    let wobble = Normal::new(0.0, 0.035).expect("finite std");
    let (sin, cos) = angle.sin_cos();
    let strokes: Vec<Vec<(f64, f64)>> = digit_strokes(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x - 0.5 + wobble.sample(rng), y - 0.5 + wobble.sample(rng));
                    let x = x + shear * y;
                    let (x, y) = (x * scale * aspect, y * scale);
                    (cos * x - sin * y + 0.5 + tx, sin * x + cos * y + 0.5 + ty)
                })
                .collect()
        })
        .collect();
    // the digit occupies the central 20x20 pixels like the classic set
    let mut img = vec![0.0; SIZE * SIZE];
    for r in 0..SIZE {
        for c in 0..SIZE {
            let p = ((c as f64 + 0.5 - 4.0) / 20.0, (r as f64 + 0.5 - 4.0) / 20.0);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(|w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let v = ink * (1.0 - (d - width) / 0.05).clamp(0.0, 1.0);
            img[r * SIZE + c] = (v * 255.0).round() / 255.0;
        }
    }
    img
}

/// A balanced set of rendered digits `[N, 1, 28, 28]`, deterministic under
/// `seed`.
pub fn synthetic_digits(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("need at least one image"));
    }
    let mut data = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = keyed_rng(&[seed, i as u64, 0xd161]);
        let digit = rng.random_range(0..10);
        data.extend(render_digit(digit, &mut rng));
        labels.push(digit);
    }
    Dataset::new(Tensor::new(vec![n, 1, 28, 28], data)?, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        synthetic_digits(20, 1).unwrap()
    }

    #[test]
    fn idx_round_trip_is_exact() {
        let ds = tiny();
        let (i, l) = write_idx(&ds).unwrap();
        let back = parse_idx(&i, &l).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn idx_rejects_malformed_input() {
        let ds = tiny();
        let (i, l) = write_idx(&ds).unwrap();
        assert!(parse_idx(&i[..i.len() - 1], &l).is_err());
        let mut bad = i.clone();
        bad[3] = 0x01;
        assert!(parse_idx(&bad, &l).is_err());
        let short = write_idx(&ds.head(5)).unwrap().1;
        assert!(parse_idx(&i, &short).is_err());
        assert!(parse_idx(&i[..10], &l).is_err());
    }

    #[test]
    fn severity_zero_is_identity() {
        let ds = tiny();
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, 0, 3).unwrap();
            assert_eq!(apply_corruption(&ds.image(0), &spec, 0).unwrap(), ds.image(0));
        }
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6, 0).is_err());
    }

    #[test]
    fn corruption_deterministic_and_in_range() {
        let ds = tiny();
        for spec in corruption_suite(9) {
            let a = apply_corruption(&ds.image(3), &spec, 3).unwrap();
            let b = apply_corruption(&ds.image(3), &spec, 3).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn corruption_spec_parsing() {
        let s = CorruptionSpec::parse("gaussian-blur:4", 0).unwrap();
        assert_eq!(s.kind, CorruptionKind::GaussianBlur);
        assert_eq!(s.parameter(), Some(2.0));
        assert!(CorruptionSpec::parse("fog:2", 0).is_err());
        assert!(CorruptionSpec::parse("contrast", 0).is_err());
    }

    #[test]
    fn label_noise_counts() {
        let ds = synthetic_digits(1000, 2).unwrap();
        let split = inject_label_noise(&ds, 0.2, 5).unwrap();
        assert_eq!(split.noisy.len(), 200);
        assert_eq!(split.clean.len(), 800);
        for &i in &split.noisy {
            assert_ne!(split.dataset.labels[i], split.original_labels[i]);
        }
        let none = inject_label_noise(&ds, 0.0, 5).unwrap();
        assert!(none.noisy.is_empty());
        assert_eq!(none.dataset, ds);
        let one_class = Dataset::new(Tensor::zeros(&[2, 1, 2, 2]), vec![0, 0], 1).unwrap();
        assert!(inject_label_noise(&one_class, 0.5, 0).is_err());
        assert!(inject_label_noise(&one_class, 0.0, 0).is_ok());
    }

    #[test]
    fn digits_are_balanced_and_distinct() {
        let ds = synthetic_digits(500, 4).unwrap();
        let mut counts = [0usize; 10];
        ds.labels.iter().for_each(|&y| counts[y] += 1);
        assert!(counts.iter().all(|&c| c > 25));
        assert_eq!(synthetic_digits(500, 4).unwrap(), ds);
        let ink: f64 = ds.images.data().iter().sum::<f64>() / ds.len() as f64;
        assert!(ink > 40.0 && ink < 250.0, "{ink}");
    }
}
