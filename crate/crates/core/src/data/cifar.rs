//! CIFAR-10 binary records: one label byte followed by channel-major pixels.

use super::{DataError, LabeledDataset};
use crate::tensor::Tensor;
use std::path::Path;

/// Bytes per 3×32×32 record.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decodes records of `1 + c·h·w` bytes. Labels must be below `num_classes`.
pub fn read_records(bytes: &[u8], [c, h, w]: [usize; 3], num_classes: usize) -> Result<LabeledDataset, DataError> {
    let px = c * h * w;
    let rec = px + 1;
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(DataError::Corrupt(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * px);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let l = r[0] as usize;
        if l >= num_classes {
            return Err(DataError::InvalidArgument(format!(
                "record {i}: label byte {l} outside {num_classes} classes"
            )));
        }
        labels.push(l);
        data.extend(r[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, c, h, w], data).expect("consistent shape");
    Ok(LabeledDataset {
        images,
        labels,
        num_classes,
    })
}

pub fn load_cifar10_binary(path: &Path) -> Result<LabeledDataset, DataError> {
    read_records(&std::fs::read(path)?, [3, 32, 32], 10)
}

/// Writes `d` in the same record layout. Single-channel images are
/// replicated to `channels` planes.
pub fn write_records(d: &LabeledDataset, channels: usize, path: &Path) -> Result<(), DataError> {
    let [c, h, w] = d.image_shape();
    if c != channels && c != 1 {
        return Err(DataError::InvalidArgument(format!(
            "cannot write {c}-channel images as {channels} channels"
        )));
    }
    if d.num_classes > 256 {
        return Err(DataError::InvalidArgument("labels do not fit a byte".into()));
    }
    let mut out = Vec::with_capacity(d.len() * (1 + channels * h * w));
    for i in 0..d.len() {
        out.push(d.labels[i] as u8);
        let img = d.image(i);
        let to_byte = |v: &f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        if c == channels {
            out.extend(img.iter().map(to_byte));
        } else {
            for _ in 0..channels {
                out.extend(img.iter().map(to_byte));
            }
        }
    }
    crate::nn::write_atomic(path, &out)?;
    Ok(())
}
