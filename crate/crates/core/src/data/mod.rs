//! Datasets, the corner-patch trigger, and training-set poisoning.

mod cifar;
mod synthetic;

pub use cifar::{load_cifar10_binary, read_records, write_records, CIFAR_RECORD};
pub use synthetic::{generate_synthetic, SyntheticTaskConfig};

use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Side length of the square trigger patch.
pub const TRIGGER_SIZE: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt data file: {0}")]
    Corrupt(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Images `[n, c, h, w]` in `[0, 1]` with a class label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Ground-truth poison membership of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonMask {
    pub flags: Vec<bool>,
    pub target_label: usize,
}

impl PoisonMask {
    pub fn clean(n: usize, target_label: usize) -> Self {
        Self {
            flags: vec![false; n],
            target_label,
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i]).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> PoisonMask {
        PoisonMask {
            flags: idx.iter().map(|&i| self.flags[i]).collect(),
            target_label: self.target_label,
        }
    }

    /// Fraction of samples labeled `label` that are poisoned.
    pub fn fraction_in_label(&self, labels: &[usize], label: usize) -> f64 {
        let (mut n, mut p) = (0usize, 0usize);
        for (&l, &f) in labels.iter().zip(&self.flags) {
            if l == label {
                n += 1;
                p += f as usize;
            }
        }
        if n == 0 {
            0.0
        } else {
            p as f64 / n as f64
        }
    }
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(DataError::InvalidArgument(format!(
                "images {s:?} with {} labels",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::InvalidArgument(format!(
                "label {l} outside {num_classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::InvalidArgument("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn pixels_per_image(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images.data()[i * p..(i + 1) * p]
    }

    /// Images at `idx` stacked into a `[idx.len(), c, h, w]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let p = self.pixels_per_image();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![idx.len(), c, h, w], data).expect("non-empty batch")
    }

    /// New dataset holding the samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<LabeledDataset, DataError> {
        if idx.is_empty() {
            return Err(DataError::InvalidArgument("empty subset".into()));
        }
        Ok(LabeledDataset {
            images: self.batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    pub fn indices_of_label(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

fn stamp(pixels: &mut [f64], [c, h, w]: [usize; 3]) {
    for ch in 0..c {
        for y in h - TRIGGER_SIZE..h {
            let row = (ch * h + y) * w;
            pixels[row + w - TRIGGER_SIZE..row + w].fill(1.0);
        }
    }
}

/// Copy of a `[c, h, w]` image with the bottom-right 4×4 patch set to 1.0
/// in every channel.
pub fn apply_trigger(image: &Tensor) -> Result<Tensor, DataError> {
    let s = image.shape();
    if s.len() != 3 || s[1] < TRIGGER_SIZE || s[2] < TRIGGER_SIZE {
        return Err(DataError::InvalidArgument(format!(
            "image {s:?} cannot hold a {TRIGGER_SIZE}x{TRIGGER_SIZE} trigger"
        )));
    }
    let mut out = image.clone();
    stamp(out.data_mut(), [s[0], s[1], s[2]]);
    Ok(out)
}

fn check_trigger_fits(d: &LabeledDataset) -> Result<(), DataError> {
    let [_, h, w] = d.image_shape();
    if h < TRIGGER_SIZE || w < TRIGGER_SIZE {
        return Err(DataError::InvalidArgument(format!(
            "{h}x{w} images cannot hold the trigger"
        )));
    }
    Ok(())
}

/// Copy of `d` with the trigger applied to the samples at `idx`.
pub fn trigger_samples(d: &LabeledDataset, idx: &[usize]) -> Result<LabeledDataset, DataError> {
    check_trigger_fits(d)?;
    let mut out = d.clone();
    let shape = d.image_shape();
    let p = d.pixels_per_image();
    let data = out.images.data_mut();
    for &i in idx {
        stamp(&mut data[i * p..(i + 1) * p], shape);
    }
    Ok(out)
}

/// Triggers `round(rate · n)` samples chosen without replacement and
/// relabels them as `target`.
pub fn poison_dataset(
    data: &LabeledDataset,
    rate: f64,
    target: usize,
    seed: u64,
) -> Result<(LabeledDataset, PoisonMask), DataError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(DataError::InvalidArgument(format!("poison rate {rate} outside (0, 1)")));
    }
    if target >= data.num_classes {
        return Err(DataError::InvalidArgument(format!(
            "target {target} outside {} classes",
            data.num_classes
        )));
    }
    let n = data.len();
    let count = (rate * n as f64).round() as usize;
    if count == 0 {
        return Err(DataError::InvalidArgument(format!(
            "rate {rate} poisons no samples out of {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, n, count).into_vec();
    let mut out = trigger_samples(data, &chosen)?;
    let mut mask = PoisonMask::clean(n, target);
    for &i in &chosen {
        mask.flags[i] = true;
        out.labels[i] = target;
    }
    Ok((out, mask))
}

/// Triggered copy of `test` without its native `target` samples, every
/// label set to `target`.
pub fn make_triggered_testset(test: &LabeledDataset, target: usize) -> Result<LabeledDataset, DataError> {
    let keep: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] != target).collect();
    if keep.is_empty() {
        return Err(DataError::InvalidArgument(
            "no test samples outside the target class".into(),
        ));
    }
    let sub = test.subset(&keep)?;
    let all: Vec<usize> = (0..sub.len()).collect();
    let mut out = trigger_samples(&sub, &all)?;
    out.labels.fill(target);
    Ok(out)
}

/// Seeded shuffle followed by a contiguous partition by `fractions`.
pub fn split(data: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>, DataError> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(DataError::InvalidArgument(format!(
            "fractions {fractions:?} do not sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = data.len();
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut acc = 0.0;
    for (k, &f) in fractions.iter().enumerate() {
        acc += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            ((acc * n as f64).round() as usize).min(n)
        };
        out.push(data.subset(&order[start..end])?);
        start = end;
    }
    Ok(out)
}
