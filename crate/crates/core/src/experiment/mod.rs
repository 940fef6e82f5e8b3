//! Config-driven orchestration: stages, run manifests and run comparison.

mod compare;
mod config;
mod manifest;
mod pipeline;

pub use compare::{compare, ComparisonRow, ComparisonTable};
pub use config::{
    parse_entries, AttackConfig, AttackMode, DatasetSource, DefenseConfig, DefenseKind, ExperimentConfig, ModelConfig,
    PoisonConfig,
};
pub use manifest::{file_hash, RunManifest, StageRecord, StageStatus, MANIFEST_FILE};
pub use pipeline::{
    AttackMetrics, BaselineMetrics, ClassClusterSummary, ClusterDocument, Datasets, PoisonDocument, PruneDocument,
    RetrainDocument, Run, SpectralDocument, Stage, ACCURACY_WINDOW, CONFIG_FILE, HISTOGRAM_BINS, TEST_SEED_OFFSET,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    /// Bad configuration, flags or missing inputs.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// 1 for validation problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Validation(_) => 1,
            _ => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for ExperimentError {
            fn from(e: $t) -> Self {
                ExperimentError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    crate::train::TrainError,
    crate::defenses::DefenseError,
    crate::data::DataError,
    crate::tensor::TensorError,
    crate::selftest::SelftestError
);

impl From<crate::nn::CheckpointError> for ExperimentError {
    fn from(e: crate::nn::CheckpointError) -> Self {
        if matches!(&e, crate::nn::CheckpointError::Io(io) if io.kind() == std::io::ErrorKind::NotFound) {
            ExperimentError::Validation(e.to_string())
        } else {
            ExperimentError::Runtime(e.to_string())
        }
    }
}
