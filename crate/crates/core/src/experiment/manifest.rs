use super::ExperimentError;
use crate::nn::{read_checkpoint, write_atomic};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the run directory.
    pub files: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// Set once any stage has failed.
    pub partial: bool,
    pub stages: Vec<StageRecord>,
}

pub(crate) fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        let t = now_unix();
        RunManifest {
            config_hash: config_hash.to_string(),
            tool_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            created_unix: t,
            updated_unix: t,
            partial: false,
            stages: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Validation(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Validation(format!("malformed manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    /// Replaces any earlier record of the same stage.
    pub fn record(&mut self, rec: StageRecord) {
        self.stages.retain(|s| s.name != rec.name);
        self.updated_unix = rec.finished_unix;
        self.stages.push(rec);
        self.partial = self.stages.iter().any(|s| s.status == StageStatus::Failed);
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Checks that every listed file exists and carries this manifest's
    /// config hash.
    pub fn verify(&self, dir: &Path) -> Result<(), ExperimentError> {
        for s in &self.stages {
            for f in &s.files {
                let found = file_hash(&dir.join(f))?;
                if found != self.config_hash {
                    return Err(ExperimentError::Validation(format!(
                        "{f}: config hash {found}, manifest has {}",
                        self.config_hash
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Config hash stored in an output file: the `# config_hash:` header of a
/// CSV, the `config_hash` field of a JSON document or a checkpoint's
/// metadata.
pub fn file_hash(path: &Path) -> Result<String, ExperimentError> {
    let missing = |e: std::io::Error| ExperimentError::Validation(format!("{}: {e}", path.display()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let text = std::fs::read_to_string(path).map_err(missing)?;
            text.lines()
                .next()
                .and_then(|l| l.strip_prefix("# config_hash: "))
                .map(|h| h.trim().to_string())
                .ok_or_else(|| ExperimentError::Validation(format!("{}: no config hash header", path.display())))
        }
        Some("json") => {
            let text = std::fs::read_to_string(path).map_err(missing)?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| ExperimentError::Validation(format!("{}: {e}", path.display())))?;
            v.get("config_hash")
                .and_then(|h| h.as_str())
                .map(str::to_string)
                .ok_or_else(|| ExperimentError::Validation(format!("{}: no config_hash field", path.display())))
        }
        Some("ckpt") => read_checkpoint(path)
            .map(|c| c.meta.config_hash)
            .map_err(|e| ExperimentError::Validation(format!("{}: {e}", path.display()))),
        _ => Err(ExperimentError::Validation(format!(
            "{}: unknown file type",
            path.display()
        ))),
    }
}
