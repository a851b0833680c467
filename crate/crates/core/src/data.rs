//! Labeled image datasets, class-indexed sampling, and the toy fixture.
//!
//! On-disk layout for a dataset `name` under `root`:
//!
//! ```text
//! root/name/train.json          manifest
//! root/name/train.images.f32    N*C*H*W little-endian f32, raw pixel values
//! root/name/train.labels.i64    N little-endian i64
//! ```
//!
//! and likewise for `test`. Both manifests carry the per-channel mean/std of
//! the train split; loading maps pixels through
//! `clamp((x - mean) / (3 * std), -1, 1)`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use gencond_tensor::Tensor;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations covered by the `[-1, 1]` range after normalization.
pub const NORM_SPAN: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

/// Per-channel affine normalization into `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Stats under which normalization is the identity on `[-1, 1]`.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0 / NORM_SPAN; channels],
        }
    }

    /// Per-channel mean and population std of raw `[N, C, H, W]` data.
    pub fn from_raw(raw: &[f64], channels: usize, plane: usize) -> Self {
        let n = raw.len() / (channels * plane).max(1);
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let vals = (0..n).flat_map(|i| raw[(i * channels + c) * plane..][..plane].iter());
            let count = (n * plane) as f64;
            let m = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[c] = m;
            std[c] = var.sqrt().max(1e-12);
        }
        Self { mean, std }
    }

    pub fn normalize_value(&self, c: usize, x: f64) -> f64 {
        ((x - self.mean[c]) / (NORM_SPAN * self.std[c])).clamp(-1.0, 1.0)
    }

    pub fn denormalize_value(&self, c: usize, v: f64) -> f64 {
        v * NORM_SPAN * self.std[c] + self.mean[c]
    }

    /// Normalizes `[N, C, H, W]` data in place.
    pub fn normalize(&self, data: &mut [f64], plane: usize) {
        let channels = self.mean.len();
        for (k, v) in data.iter_mut().enumerate() {
            let c = (k / plane) % channels;
            *v = self.normalize_value(c, *v);
        }
    }

    pub fn denormalize(&self, data: &mut [f64], plane: usize) {
        let channels = self.mean.len();
        for (k, v) in data.iter_mut().enumerate() {
            let c = (k / plane) % channels;
            *v = self.denormalize_value(c, *v);
        }
    }
}

/// Manifest stored beside each split's binary arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub images_file: String,
    pub labels_file: String,
}

/// Images with integer labels. Immutable after construction.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    /// `[N, C, H, W]`, values in `[-1, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
    by_class: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        let name = name.into();
        if images.ndim() != 4 {
            return Err(Error::Shape(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::Integrity(format!(
                "{} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Integrity("num_classes must be positive".into()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Integrity(format!(
                "label {y} at index {i} outside [0, {num_classes})"
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Integrity(format!("pixel value {v} outside [-1, 1]")));
        }
        if normalization.mean.len() != images.dim(1) || normalization.std.len() != images.dim(1) {
            return Err(Error::Integrity("normalization stats do not match channel count".into()));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        if split == Split::Train {
            if labels.len() < num_classes {
                return Err(Error::Integrity(format!(
                    "train split has {} samples for {num_classes} classes",
                    labels.len()
                )));
            }
            if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
                return Err(Error::Integrity(format!("class {c} has no train samples")));
            }
        }
        Ok(Self {
            name,
            split,
            images,
            labels,
            num_classes,
            normalization,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.dim(1)
    }

    pub fn height(&self) -> usize {
        self.images.dim(2)
    }

    pub fn width(&self) -> usize {
        self.images.dim(3)
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape {
            channels: self.channels(),
            height: self.height(),
            width: self.width(),
        }
    }

    /// Indices of all samples with label `class`, ascending.
    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    /// Images at `indices`, stacked.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        self.images.select_rows(indices)
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn manifest(&self, images_file: &str, labels_file: &str) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            split: self.split,
            n: self.len(),
            channels: self.channels(),
            height: self.height(),
            width: self.width(),
            num_classes: self.num_classes,
            mean: self.normalization.mean.clone(),
            std: self.normalization.std.clone(),
            images_file: images_file.into(),
            labels_file: labels_file.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Real images of one class used as a feature-matching target.
#[derive(Clone, Debug)]
pub struct AssociationBatch {
    pub class_id: usize,
    pub indices: Vec<usize>,
    pub images: Tensor,
}

impl AssociationBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform without-replacement sample of `size` images of `class_id`.
pub fn sample_association(
    dataset: &LabeledDataset,
    class_id: usize,
    size: usize,
    seed: u64,
) -> Result<AssociationBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_association_with(dataset, class_id, size, &mut rng)
}

pub fn sample_association_with<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    class_id: usize,
    size: usize,
    rng: &mut R,
) -> Result<AssociationBatch> {
    if class_id >= dataset.num_classes {
        return Err(Error::Argument(format!("class {class_id} out of range")));
    }
    let pool = dataset.class_indices(class_id);
    if size == 0 || size > pool.len() {
        return Err(Error::Argument(format!(
            "association size {size} not in [1, {}] for class {class_id}",
            pool.len()
        )));
    }
    let indices: Vec<usize> = index::sample(rng, pool.len(), size)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    let images = dataset.gather(&indices);
    Ok(AssociationBatch {
        class_id,
        indices,
        images,
    })
}

/// Where one synthetic-set image came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SampleSource {
    /// Generated from codebook row `code` conditioned on `class`.
    Code { code: usize, class: usize },
    /// Copied from the real dataset.
    Real { index: usize },
}

/// A small training set with exactly `ipc` images per class.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ipc: usize,
    pub num_classes: usize,
    pub sources: Vec<SampleSource>,
}

impl SyntheticSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            if y >= self.num_classes {
                return Err(Error::Integrity(format!("synthetic label {y} out of range")));
            }
            counts[y] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k != self.ipc) {
            return Err(Error::Integrity(format!(
                "class {c} has {} synthetic images, expected {}",
                counts[c], self.ipc
            )));
        }
        if self.images.max_abs() > 1.0 {
            return Err(Error::Integrity("synthetic pixel outside [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Parameters of the Gaussian-blob toy fixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyParams {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Std of the per-pixel Gaussian noise at a 16-pixel side, in `[0, 1]`
    /// intensity units. Scales linearly with the image side.
    pub noise: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            num_classes: 3,
            per_class: 100,
            image_size: 16,
            seed: 7,
            noise: 1.2,
        }
    }
}

/// Train split of the toy fixture with default noise.
pub fn make_toy_dataset(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<LabeledDataset> {
    let params = ToyParams {
        num_classes,
        per_class,
        image_size,
        seed,
        ..ToyParams::default()
    };
    make_toy_split(&params, Split::Train)
}

/// One split of the toy fixture.
///
/// Every class owns two Gaussian blobs on cells of a 3x3 grid drawn from
/// `seed`. Each sample jitters the blobs by up to 6% of the side, scales
/// their amplitude, adds one class-independent distractor blob and
/// per-pixel noise. The class layouts are shared between splits; the
/// per-sample draws are not.
pub fn make_toy_split(p: &ToyParams, split: Split) -> Result<LabeledDataset> {
    if p.num_classes < 2 || p.per_class < 2 || p.image_size < 8 {
        return Err(Error::Argument(format!(
            "toy dataset needs num_classes >= 2, per_class >= 2, image_size >= 8 (got {}, {}, {})",
            p.num_classes, p.per_class, p.image_size
        )));
    }
    if !(p.noise >= 0.0) {
        return Err(Error::Argument("toy noise must be non-negative".into()));
    }
    let s = p.image_size;
    let sf = s as f64;
    let sigma = 0.1 * sf;
    let noise_std = p.noise * sf / 16.0;
    let layouts = toy_layouts(p.num_classes, p.seed);
    let cell = |k: usize| (0.2 + 0.3 * (k % 3) as f64) * sf;
    let salt = match split {
        Split::Train => 0x7472_6169_6e00_0001,
        Split::Test => 0x7465_7374_0000_0002,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ salt);
    let n = p.num_classes * p.per_class;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % p.num_classes;
        let dx = rng.random_range(-0.06..0.06) * sf;
        let dy = rng.random_range(-0.06..0.06) * sf;
        let amp = rng.random_range(0.7..1.0);
        let distractor = (rng.random_range(0.0..sf), rng.random_range(0.0..sf));
        let d_amp = rng.random_range(0.3..0.7);
        for r in 0..s {
            for c in 0..s {
                let (x, yy) = (c as f64 + 0.5, r as f64 + 0.5);
                let mut v = 0.0;
                for &k in &layouts[y] {
                    let (cx, cy) = (cell(k), cell(k / 3));
                    let d2 = (x - cx - dx).powi(2) + (yy - cy - dy).powi(2);
                    v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                let d2 = (x - distractor.0).powi(2) + (yy - distractor.1).powi(2);
                v += d_amp * (-d2 / (2.0 * sigma * sigma)).exp();
                let noise: f64 = rng.sample(StandardNormal);
                v += noise_std * noise;
                data.push((2.0 * v - 1.0).clamp(-1.0, 1.0));
            }
        }
        labels.push(y);
    }
    let images = Tensor::new([n, 1, s, s], data);
    LabeledDataset::new(
        "toy-blobs",
        split,
        images,
        labels,
        p.num_classes,
        Normalization::identity(1),
    )
}

/// Two cells of a 3x3 grid per class. Pairs are drawn from a seeded shuffle,
/// preferring pairs that share no cell with earlier classes.
fn toy_layouts(num_classes: usize, seed: u64) -> Vec<[usize; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<[usize; 2]> = (0..9).flat_map(|a| (a + 1..9).map(move |b| [a, b])).collect();
    pairs.shuffle(&mut rng);
    let mut chosen: Vec<[usize; 2]> = Vec::with_capacity(num_classes);
    let mut used = [false; 9];
    for pair in &pairs {
        if chosen.len() < num_classes && !used[pair[0]] && !used[pair[1]] {
            used[pair[0]] = true;
            used[pair[1]] = true;
            chosen.push(*pair);
        }
    }
    for pair in &pairs {
        if chosen.len() < num_classes && !chosen.contains(pair) {
            chosen.push(*pair);
        }
    }
    let mut out = chosen;
    while out.len() < num_classes {
        // more classes than distinct pairs: reuse layouts cyclically
        out.push(out[out.len() % 36]);
    }
    out
}

/// Loads `name` from `root`. Names starting with `toy` resolve to the toy
/// fixture with default parameters.
pub fn load_dataset(name: &str, root: &Path, split: Split) -> Result<LabeledDataset> {
    if name.starts_with("toy") {
        return make_toy_split(&ToyParams::default(), split);
    }
    let dir = root.join(name);
    let manifest_path = dir.join(format!("{split}.json"));
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Load {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if m.split != split {
        return Err(Error::Integrity(format!(
            "{} declares split {} but was loaded as {split}",
            manifest_path.display(),
            m.split
        )));
    }
    if m.mean.len() != m.channels || m.std.len() != m.channels {
        return Err(Error::Integrity("manifest mean/std length differs from channels".into()));
    }
    let plane = m.height * m.width;
    let raw = read_f32(&dir.join(&m.images_file), m.n * m.channels * plane)?;
    let raw_labels = read_i64(&dir.join(&m.labels_file), m.n)?;
    let mut labels = Vec::with_capacity(m.n);
    for (i, &y) in raw_labels.iter().enumerate() {
        if y < 0 || y as usize >= m.num_classes {
            return Err(Error::Integrity(format!(
                "label {y} at index {i} outside [0, {})",
                m.num_classes
            )));
        }
        labels.push(y as usize);
    }
    let norm = Normalization {
        mean: m.mean.clone(),
        std: m.std.clone(),
    };
    let mut data = raw;
    norm.normalize(&mut data, plane);
    let images = Tensor::new([m.n, m.channels, m.height, m.width], data);
    LabeledDataset::new(m.name, split, images, labels, m.num_classes, norm)
}

fn read_exact_len(path: &Path, bytes: usize) -> Result<Vec<u8>> {
    let buf = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if buf.len() != bytes {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("expected {bytes} bytes, found {}", buf.len()),
        });
    }
    Ok(buf)
}

fn read_f32(path: &Path, count: usize) -> Result<Vec<f64>> {
    let buf = read_exact_len(path, count * 4)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

fn read_i64(path: &Path, count: usize) -> Result<Vec<i64>> {
    let buf = read_exact_len(path, count * 8)?;
    Ok(buf
        .chunks_exact(8)
        .map(|b| i64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes one split in the on-disk layout. `raw` holds unnormalized pixels
/// `[N, C, H, W]`; `stats` should be the train split's statistics.
#[allow(clippy::too_many_arguments)]
pub fn write_dataset(
    root: &Path,
    name: &str,
    split: Split,
    raw: &[f32],
    labels: &[i64],
    shape: ImageShape,
    num_classes: usize,
    stats: &Normalization,
) -> Result<PathBuf> {
    let n = labels.len();
    if raw.len() != n * shape.numel() {
        return Err(Error::Shape(format!(
            "{} pixel values for {n} images of {shape:?}",
            raw.len()
        )));
    }
    let dir = root.join(name);
    fs::create_dir_all(&dir)?;
    let images_file = format!("{split}.images.f32");
    let labels_file = format!("{split}.labels.i64");
    let img_bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(&images_file), img_bytes)?;
    let lab_bytes: Vec<u8> = labels.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(&labels_file), lab_bytes)?;
    let manifest = DatasetManifest {
        name: name.into(),
        split,
        n,
        channels: shape.channels,
        height: shape.height,
        width: shape.width,
        num_classes,
        mean: stats.mean.clone(),
        std: stats.std.clone(),
        images_file,
        labels_file,
    };
    let path = dir.join(format!("{split}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
