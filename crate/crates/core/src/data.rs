//! Datasets, the subset/validation split protocol and augmentation.
//!
//! Images are stored as raw `[0, 1]` intensities and normalised per channel
//! when a batch is assembled, so augmentations act on pixel values.
//! All randomness flows from `ChaCha8Rng` streams seeded by the caller.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    shape: [usize; 3],
    images: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// A normalised mini-batch and the dataset indices it came from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(shape: [usize; 3], images: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if images.len() != per * labels.len() {
            return Err(Error::ShapeMismatch("image buffer does not match label count".into()));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::ShapeMismatch("label out of range".into()));
        }
        let mut ds = Dataset { shape, images, labels, num_classes, mean: vec![0.0; shape[0]], std: vec![1.0; shape[0]] };
        ds.fit_normalisation();
        Ok(ds)
    }

    fn fit_normalisation(&mut self) {
        let [c, h, w] = self.shape;
        let hw = h * w;
        let n = self.labels.len().max(1) as f64 * hw as f64;
        for ch in 0..c {
            let vals = || self.images.chunks_exact(c * hw).flat_map(|img| &img[ch * hw..(ch + 1) * hw]);
            let mean = vals().sum::<f64>() / n;
            let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            self.mean[ch] = mean;
            self.std[ch] = var.sqrt().max(1e-6);
        }
    }

    /// Use another dataset's normalisation (test sets use the train statistics).
    pub fn with_normalisation_of(mut self, other: &Dataset) -> Self {
        self.mean = other.mean.clone();
        self.std = other.std.clone();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.shape.iter().product::<usize>();
        &self.images[i * per..(i + 1) * per]
    }
    pub fn all_ids(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Restrict to `ids`, keeping normalisation.
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(ids.len() * self.shape.iter().product::<usize>());
        for &i in ids {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape,
            images,
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    fn normalise_into(&self, img: &[f64], out: &mut [f64]) {
        let hw = self.shape[1] * self.shape[2];
        for (ch, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&img[ch * hw..(ch + 1) * hw]) {
                *o = (v - m) / s;
            }
        }
    }

    pub fn batch(&self, ids: &[usize]) -> Batch {
        self.batch_with(ids, |img| img.to_vec())
    }

    /// Assemble a batch, transforming each raw image first.
    pub fn batch_with(&self, ids: &[usize], mut transform: impl FnMut(&[f64]) -> Vec<f64>) -> Batch {
        let [c, h, w] = self.shape;
        let per = c * h * w;
        let mut data = vec![0.0; ids.len() * per];
        for (s, &i) in ids.iter().enumerate() {
            let img = transform(self.image(i));
            self.normalise_into(&img, &mut data[s * per..(s + 1) * per]);
        }
        Batch { x: Tensor::from_vec([ids.len(), c, h, w], data), labels: ids.iter().map(|&i| self.labels[i]).collect(), ids: ids.to_vec() }
    }

    /// Consecutive batches over `ids` in the given order.
    pub fn batches(&self, ids: &[usize], batch_size: usize) -> Vec<Batch> {
        ids.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }
}

/// Gaussian class blobs on a noisy background with a random distractor blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub size: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { classes: 4, per_class_train: 96, per_class_test: 64, size: 8, channels: 3, noise: 0.25, seed: 7 }
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.size < 2 || spec.channels == 0 {
        return Err(Error::Config("synthetic dataset needs classes, channels and size >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size as f64;
    let protos: Vec<(f64, f64, Vec<f64>)> = (0..spec.classes)
        .map(|c| {
            let angle = std::f64::consts::TAU * c as f64 / spec.classes as f64;
            let (cx, cy) = (s / 2.0 + 0.28 * s * angle.cos(), s / 2.0 + 0.28 * s * angle.sin());
            let colour = (0..spec.channels).map(|_| rng.random_range(0.3..1.0)).collect();
            (cx, cy, colour)
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0, s / 8.0).expect("positive std");
    let sigma = s / 5.0;
    let [c, h, w] = [spec.channels, spec.size, spec.size];
    let draw = |n_per: usize, rng: &mut ChaCha8Rng| {
        let mut images = Vec::with_capacity(n_per * spec.classes * c * h * w);
        let mut labels = Vec::new();
        for _ in 0..n_per {
            for (label, (cx, cy, colour)) in protos.iter().enumerate() {
                let (bx, by) = (cx + jitter.sample(rng), cy + jitter.sample(rng));
                let amp = rng.random_range(0.6..1.2);
                let (dx, dy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
                let dcol: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..0.6)).collect();
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                            let blob = (-((fx - bx).powi(2) + (fy - by).powi(2)) / (2.0 * sigma * sigma)).exp();
                            let distract = (-((fx - dx).powi(2) + (fy - dy).powi(2)) / (2.0 * sigma * sigma)).exp();
                            let v = 0.2 + amp * colour[ch] * blob + dcol[ch] * distract + noise.sample(rng);
                            images.push(v.clamp(0.0, 1.0));
                        }
                    }
                }
                labels.push(label);
            }
        }
        (images, labels)
    };
    let (ti, tl) = draw(spec.per_class_train, &mut rng);
    let (vi, vl) = draw(spec.per_class_test, &mut rng);
    let train = Dataset::new([c, h, w], ti, tl, spec.classes)?;
    let test = Dataset::new([c, h, w], vi, vl, spec.classes)?.with_normalisation_of(&train);
    Ok((train, test))
}

/// CIFAR-10 binary release (`data_batch_{1..5}.bin`, `test_batch.bin`).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let read = |names: &[String]| -> Result<(Vec<f64>, Vec<usize>)> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for name in names {
            let p = dir.join(name);
            let bytes = std::fs::read(&p).at(&p)?;
            if bytes.len() % 3073 != 0 {
                return Err(Error::Format(format!("{}: not a CIFAR-10 binary batch", p.display())));
            }
            for rec in bytes.chunks_exact(3073) {
                labels.push(rec[0] as usize);
                images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
            }
        }
        Ok((images, labels))
    };
    let train_names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let (ti, tl) = read(&train_names)?;
    let (vi, vl) = read(&["test_batch.bin".to_string()])?;
    let train = Dataset::new([3, 32, 32], ti, tl, 10)?;
    let test = Dataset::new([3, 32, 32], vi, vl, 10)?.with_normalisation_of(&train);
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub per_class_subset: usize,
    pub per_class_val: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { per_class_subset: 256, per_class_val: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub subset: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified sampling without replacement: each class is shuffled once
/// and its first indices go to the subset, the next ones to validation.
pub fn make_splits(labels: &[usize], num_classes: usize, spec: &SplitSpec) -> Result<Splits> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..num_classes).map(|c| (c, Vec::new())).collect();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let need = spec.per_class_subset + spec.per_class_val;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut subset = Vec::new();
    let mut val = Vec::new();
    for (class, mut ids) in by_class {
        if ids.len() < need {
            return Err(Error::InsufficientData { class, available: ids.len(), required: need });
        }
        ids.shuffle(&mut rng);
        subset.extend_from_slice(&ids[..spec.per_class_subset]);
        val.extend_from_slice(&ids[spec.per_class_subset..need]);
    }
    subset.sort_unstable();
    val.sort_unstable();
    Ok(Splits { subset, val })
}

pub fn write_index_file(path: &Path, ids: &[usize]) -> Result<()> {
    let text: String = ids.iter().map(|i| format!("{i}\n")).collect();
    std::fs::write(path, text).at(path)
}

pub fn read_index_file(path: &Path) -> Result<Vec<usize>> {
    std::fs::read_to_string(path)
        .at(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse().map_err(|_| Error::Format(format!("{}: bad index `{l}`", path.display()))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Search,
    FinetuneBase,
    FinetuneExtra,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugOp {
    HorizontalFlip { p: f64 },
    /// Zero-pad by `pad` pixels, then crop back to the original size at a random offset.
    PadCrop { pad: usize },
    /// Multiplicative factors drawn uniformly from `1 ± magnitude`.
    ColorJitter { brightness: f64, contrast: f64, saturation: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub stage: Stage,
    pub ops: Vec<AugOp>,
}

pub const JITTER_MAGNITUDE: f64 = 0.2;

impl AugmentationPolicy {
    /// No augmentation during the sub-network search.
    pub fn search() -> Self {
        AugmentationPolicy { stage: Stage::Search, ops: Vec::new() }
    }

    pub fn identity(stage: Stage) -> Self {
        AugmentationPolicy { stage, ops: Vec::new() }
    }

    /// Flip and pad-crop; `extra` adds brightness/contrast/saturation distortion.
    pub fn finetune(pad: usize, extra: bool) -> Self {
        let mut ops = vec![AugOp::HorizontalFlip { p: 0.5 }, AugOp::PadCrop { pad }];
        if extra {
            ops.push(AugOp::ColorJitter {
                brightness: JITTER_MAGNITUDE,
                contrast: JITTER_MAGNITUDE,
                saturation: JITTER_MAGNITUDE,
            });
        }
        AugmentationPolicy { stage: if extra { Stage::FinetuneExtra } else { Stage::FinetuneBase }, ops }
    }

    /// CIFAR fine-tuning: flip, pad-4 crop-32 and colour distortion.
    pub fn cifar_finetune() -> Self {
        Self::finetune(4, true)
    }

    pub fn apply(&self, img: &[f64], shape: [usize; 3], rng: &mut impl Rng) -> Vec<f64> {
        let mut out = img.to_vec();
        for op in &self.ops {
            apply_op(op, &mut out, shape, rng);
        }
        out
    }
}

/// Two independent draws of the policy on one example.
pub fn augment_pair(img: &[f64], shape: [usize; 3], policy: &AugmentationPolicy, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let a = policy.apply(img, shape, rng);
    let b = policy.apply(img, shape, rng);
    (a, b)
}

fn apply_op(op: &AugOp, img: &mut [f64], [c, h, w]: [usize; 3], rng: &mut impl Rng) {
    let hw = h * w;
    match *op {
        AugOp::HorizontalFlip { p } => {
            if rng.random::<f64>() < p {
                for row in img.chunks_exact_mut(w) {
                    row.reverse();
                }
            }
        }
        AugOp::PadCrop { pad } => {
            let oy = rng.random_range(0..=2 * pad);
            let ox = rng.random_range(0..=2 * pad);
            let src = img.to_vec();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = ((y + oy) as isize - pad as isize, (x + ox) as isize - pad as isize);
                        img[ch * hw + y * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            src[ch * hw + sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        AugOp::ColorJitter { brightness, contrast, saturation } => {
            let mut factor = |m: f64| if m > 0.0 { rng.random_range(1.0 - m..=1.0 + m) } else { 1.0 };
            let (b, ct, s) = (factor(brightness), factor(contrast), factor(saturation));
            for v in img.iter_mut() {
                *v *= b;
            }
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            for v in img.iter_mut() {
                *v = mean + (*v - mean) * ct;
            }
            for p in 0..hw {
                let gray = (0..c).map(|ch| img[ch * hw + p]).sum::<f64>() / c as f64;
                for ch in 0..c {
                    let v = &mut img[ch * hw + p];
                    *v = gray + (*v - gray) * s;
                }
            }
            for v in img.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
}
