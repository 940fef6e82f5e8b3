//! Binary checkpoint format.
//!
//! ```text
//! "BDL1" | version u32 | descriptor (u32 length + UTF-8 JSON) | count u32
//! per tensor: name (u32 length + UTF-8) | rank u32 | dims u32 × rank | f64 × numel
//! ```
//! All integers and floats are little-endian.

use super::{ArchSpec, Discriminator, DiscriminatorSpec, PruneMask, SplitClassifier};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"BDL1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("tensor {name}: shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl CheckpointError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::Io(_) => 1,
            CheckpointError::Corrupt(_) => 2,
            CheckpointError::VersionMismatch { .. } => 3,
            CheckpointError::ArchitectureMismatch(_) => 4,
            CheckpointError::ShapeMismatch { .. } => 5,
        }
    }
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub hyper: BTreeMap<String, String>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    arch: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prune: Option<Vec<bool>>,
    meta: TrainingMeta,
}

/// Raw decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub kind: String,
    pub arch: serde_json::Value,
    pub prune: Option<Vec<bool>>,
    pub meta: TrainingMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn encode(desc: &Descriptor, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_str(&mut buf, &serde_json::to_string(desc).expect("descriptor serializes"));
    put_u32(&mut buf, tensors.len() as u32);
    for (name, t) in tensors {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Writes to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let desc: Descriptor = serde_json::from_str(&r.string("descriptor")?)
        .map_err(|e| CheckpointError::Corrupt(format!("descriptor: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?,
            &name,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(CheckpointFile {
        kind: desc.kind,
        arch: desc.arch,
        prune: desc.prune,
        meta: desc.meta,
        tensors,
    })
}

fn fill(file: CheckpointFile, mut targets: Vec<(String, &mut Tensor)>) -> Result<(), CheckpointError> {
    if file.tensors.len() != targets.len() {
        return Err(CheckpointError::ArchitectureMismatch(format!(
            "{} tensors stored, model has {}",
            file.tensors.len(),
            targets.len()
        )));
    }
    for ((name, t), (want, slot)) in file.tensors.into_iter().zip(targets.iter_mut()) {
        if &name != want {
            return Err(CheckpointError::ArchitectureMismatch(format!(
                "tensor {name} where {want} was expected"
            )));
        }
        if t.shape() != slot.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: slot.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        **slot = t;
    }
    Ok(())
}

fn classifier_tensors(m: &SplitClassifier) -> Vec<(String, &Tensor)> {
    let mut t = m.features.named_tensors("h");
    t.extend(m.head.named_tensors("c"));
    t
}

pub fn save_classifier(m: &SplitClassifier, meta: &TrainingMeta, path: &Path) -> Result<(), CheckpointError> {
    let desc = Descriptor {
        kind: "classifier".into(),
        arch: serde_json::to_value(&m.spec).expect("arch serializes"),
        prune: m.prune.as_ref().map(|p| p.0.clone()),
        meta: meta.clone(),
    };
    write_atomic(path, &encode(&desc, &classifier_tensors(m)))?;
    Ok(())
}

/// Loads a classifier; when `expected` is given its layer shapes must match
/// the stored architecture.
pub fn load_classifier(
    path: &Path,
    expected: Option<&ArchSpec>,
) -> Result<(SplitClassifier, TrainingMeta), CheckpointError> {
    let file = read_checkpoint(path)?;
    if file.kind != "classifier" {
        return Err(CheckpointError::ArchitectureMismatch(format!(
            "file holds a {}, not a classifier",
            file.kind
        )));
    }
    let spec: ArchSpec = serde_json::from_value(file.arch.clone())
        .map_err(|e| CheckpointError::Corrupt(format!("architecture: {e}")))?;
    if let Some(want) = expected {
        if !want.same_shape(&spec) {
            return Err(CheckpointError::ArchitectureMismatch(format!(
                "stored {spec:?}, expected {want:?}"
            )));
        }
    }
    let mut m = SplitClassifier::build(&spec).map_err(|e| CheckpointError::ArchitectureMismatch(e.to_string()))?;
    if let Some(p) = &file.prune {
        if p.len() != spec.latent_dim {
            return Err(CheckpointError::Corrupt("prune mask width".into()));
        }
        m.prune = Some(PruneMask(p.clone()));
    }
    let meta = file.meta.clone();
    let mut targets = m.features.named_tensors_mut("h");
    targets.extend(m.head.named_tensors_mut("c"));
    fill(file, targets)?;
    Ok((m, meta))
}

pub fn save_discriminator(d: &Discriminator, meta: &TrainingMeta, path: &Path) -> Result<(), CheckpointError> {
    let desc = Descriptor {
        kind: "discriminator".into(),
        arch: serde_json::to_value(&d.spec).expect("arch serializes"),
        prune: None,
        meta: meta.clone(),
    };
    write_atomic(path, &encode(&desc, &d.net.named_tensors("d")))?;
    Ok(())
}

pub fn load_discriminator(path: &Path) -> Result<(Discriminator, TrainingMeta), CheckpointError> {
    let file = read_checkpoint(path)?;
    if file.kind != "discriminator" {
        return Err(CheckpointError::ArchitectureMismatch(format!(
            "file holds a {}, not a discriminator",
            file.kind
        )));
    }
    let spec: DiscriminatorSpec = serde_json::from_value(file.arch.clone())
        .map_err(|e| CheckpointError::Corrupt(format!("architecture: {e}")))?;
    let mut d = Discriminator::build(&spec).map_err(|e| CheckpointError::ArchitectureMismatch(e.to_string()))?;
    let meta = file.meta.clone();
    fill(file, d.net.named_tensors_mut("d"))?;
    Ok((d, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_like() -> SplitClassifier {
        let mut m = SplitClassifier::build(&ArchSpec::default()).unwrap();
        for (i, p) in m.params_mut().into_iter().enumerate() {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = (*v + i as f64) * std::f64::consts::PI);
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bdl");
        let m = trained_like().apply_prune(&PruneMask::from_indices(64, &[3]));
        let meta = TrainingMeta {
            epoch: 7,
            seed: 42,
            ..Default::default()
        };
        save_classifier(&m, &meta, &path).unwrap();
        let (back, meta2) = load_classifier(&path, Some(&ArchSpec::default())).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.prune, m.prune);
        assert!(m.params().iter().zip(back.params()).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn discriminator_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bdl");
        let d = Discriminator::build(&DiscriminatorSpec::new(64, 1)).unwrap();
        save_discriminator(&d, &TrainingMeta::default(), &path).unwrap();
        let (back, _) = load_discriminator(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(load_classifier(&path, None).unwrap_err().code(), 4);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bdl");
        save_classifier(&trained_like(), &TrainingMeta::default(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_classifier(&path, None).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt(_)), "{err}");
        std::fs::write(&path, b"XXXX").unwrap();
        assert_eq!(load_classifier(&path, None).unwrap_err().code(), 2);
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bdl");
        save_classifier(&trained_like(), &TrainingMeta::default(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_classifier(&path, None).unwrap_err(),
            CheckpointError::VersionMismatch { found: 2, expected: 1 }
        ));
    }

    #[test]
    fn latent_width_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bdl");
        save_classifier(&trained_like(), &TrainingMeta::default(), &path).unwrap();
        let want = ArchSpec {
            latent_dim: 32,
            ..ArchSpec::default()
        };
        let err = load_classifier(&path, Some(&want)).unwrap_err();
        assert!(matches!(err, CheckpointError::ArchitectureMismatch(_)));
    }

    #[test]
    fn missing_file_is_io() {
        let err = load_classifier(Path::new("/nonexistent/x.bdl"), None).unwrap_err();
        assert_eq!(err.code(), 1);
    }
}
