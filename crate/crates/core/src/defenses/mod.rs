//! Latent-space defenses: ranked pruning, spectral signatures and
//! activation clustering, plus retraining on the filtered set.

mod cluster;
mod prune;
mod spectral;

pub use cluster::{
    activation_cluster_filter, exclusionary_reclassification, ClassClusters, ClusterConfig, ClusterOutcome,
    ClusterVerdict, ReclassificationResult, RemovalRule, ARI_MIN_SAMPLES,
};
pub use prune::{
    activation_diff_ranking, latent_means, prune_sweep, ranking_from_means, reranked_ranking, PruneCurve, PrunePoint,
};
pub use spectral::{removal_budget, spectral_filter, spectral_histogram, spectral_scores, Histogram, HistogramBin};

use crate::data::{DataError, LabeledDataset, PoisonMask};
use crate::linalg::{LinalgError, Matrix};
use crate::nn::{ArchSpec, SplitClassifier};
use crate::tensor::TensorError;
use crate::train::{evaluate, train_baseline, Evaluation, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DefenseError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// What a filtering defense removed, and how that compares with the
/// ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub defense: String,
    pub removed_per_class: Vec<usize>,
    /// Indices into the unfiltered training set, ascending.
    pub removed: Vec<usize>,
    pub poisons_before: usize,
    pub poisons_remaining: usize,
    pub warnings: Vec<String>,
    pub retrained: Option<Evaluation>,
}

impl FilterReport {
    pub(crate) fn new(
        defense: &str,
        removed_per_class: Vec<usize>,
        removed: Vec<usize>,
        mask: &PoisonMask,
        warnings: Vec<String>,
    ) -> Self {
        let caught = removed.iter().filter(|&&i| mask.flags[i]).count();
        let before = mask.count();
        FilterReport {
            defense: defense.to_string(),
            removed_per_class,
            removed,
            poisons_before: before,
            poisons_remaining: before - caught,
            warnings,
            retrained: None,
        }
    }

    /// Poisons left after filtering, as a fraction of those present before.
    pub fn remaining_fraction(&self) -> f64 {
        if self.poisons_before == 0 {
            0.0
        } else {
            self.poisons_remaining as f64 / self.poisons_before as f64
        }
    }

    pub fn removed_count(&self) -> usize {
        self.removed.len()
    }
}

/// Filtered training set together with the report that produced it.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub report: FilterReport,
    pub filtered: LabeledDataset,
    pub filtered_mask: PoisonMask,
    /// Indices of the unfiltered set that were kept, ascending.
    pub kept: Vec<usize>,
    /// Per-sample outlier scores, if the defense produces them.
    pub scores: Option<Vec<f64>>,
}

impl FilterOutcome {
    pub(crate) fn build(
        train: &LabeledDataset,
        mask: &PoisonMask,
        report: FilterReport,
        scores: Option<Vec<f64>>,
    ) -> Result<Self, DefenseError> {
        let mut drop = vec![false; train.len()];
        report.removed.iter().for_each(|&i| drop[i] = true);
        let kept: Vec<usize> = (0..train.len()).filter(|&i| !drop[i]).collect();
        if kept.is_empty() {
            return Err(DefenseError::InvalidArgument("filter removed every sample".into()));
        }
        Ok(FilterOutcome {
            filtered: train.subset(&kept)?,
            filtered_mask: mask.subset(&kept),
            kept,
            report,
            scores,
        })
    }
}

/// Latents of `train` grouped by label: `(dataset indices, latents)`.
pub(crate) fn per_class_latents(
    model: &SplitClassifier,
    train: &LabeledDataset,
) -> Result<Vec<(Vec<usize>, Matrix)>, DefenseError> {
    if train.is_empty() {
        return Err(DefenseError::InvalidArgument("empty training set".into()));
    }
    let z = model.extract_latents(&train.images)?;
    let d = model.latent_dim();
    let all = Matrix::new(train.len(), d, z.into_data())?;
    Ok((0..train.num_classes)
        .map(|c| {
            let idx = train.indices_of_label(c);
            let m = all.select_rows(&idx);
            (idx, m)
        })
        .collect())
}

/// Trains a freshly initialised model on `filtered` and measures it.
pub fn retrain_and_measure(
    filtered: &LabeledDataset,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    clean: &LabeledDataset,
    triggered: &LabeledDataset,
) -> Result<(SplitClassifier, Evaluation), DefenseError> {
    if let Some(c) = filtered.class_counts().iter().position(|&n| n == 0) {
        return Err(DefenseError::InvalidArgument(format!(
            "filtered set has no samples of class {c}"
        )));
    }
    let model = SplitClassifier::build(arch)?;
    let (model, _) = train_baseline(model, filtered, cfg, None)?;
    let eval = evaluate(&model, clean, triggered)?;
    Ok((model, eval))
}
