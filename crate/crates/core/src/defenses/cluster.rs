use super::{per_class_latents, DefenseError, FilterOutcome, FilterReport};
use crate::data::{LabeledDataset, PoisonMask};
use crate::linalg::{adjusted_rand_index, fastica, kmeans, LinalgError, Partition};
use crate::nn::SplitClassifier;
use crate::par;
use crate::train::TrainError;
use serde::{Deserialize, Serialize};

/// Samples the target label needs before its ARI is reported.
pub const ARI_MIN_SAMPLES: usize = 20;

/// Which of the two clusters in a label gets removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum RemovalRule {
    /// Cluster with the larger ground-truth poison fraction, if that
    /// fraction is non-zero. Reads the mask.
    #[default]
    HighestPoisonFraction,
    /// Smaller cluster, when it holds at most `max_fraction` of the label.
    /// Never reads the mask.
    RelativeSize { max_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub components: usize,
    pub clusters: usize,
    pub restarts: usize,
    pub rule: RemovalRule,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            components: 10,
            clusters: 2,
            restarts: 1000,
            rule: RemovalRule::default(),
            seed: 0,
        }
    }
}

/// Clustering of one label's latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassClusters {
    pub label: usize,
    /// Dataset indices of the label's samples.
    pub indices: Vec<usize>,
    /// Cluster of each entry of `indices`.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    pub poison_fractions: Vec<f64>,
    pub removed_cluster: Option<usize>,
    pub ica_components: usize,
    pub ica_warning: bool,
    /// First two ICA sources per sample, for plotting.
    pub projection: Vec<[f64; 2]>,
}

impl ClassClusters {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.indices
            .iter()
            .zip(&self.assignment)
            .filter(|(_, &a)| a == cluster)
            .map(|(&i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub filter: FilterOutcome,
    pub classes: Vec<ClassClusters>,
    /// Agreement between the target label's clusters and the poison mask;
    /// `None` when the index is undefined or the label is too small.
    pub target_ari: Option<f64>,
}

/// Activation clustering: per label, ICA down to `components` dimensions
/// and 2-means; one cluster per label may be removed according to `rule`.
pub fn activation_cluster_filter(
    model: &SplitClassifier,
    train: &LabeledDataset,
    mask: &PoisonMask,
    cfg: &ClusterConfig,
) -> Result<ClusterOutcome, DefenseError> {
    if mask.len() != train.len() {
        return Err(DefenseError::InvalidArgument("mask length differs from dataset".into()));
    }
    if cfg.clusters < 2 || cfg.components == 0 {
        return Err(DefenseError::InvalidArgument(
            "need at least 2 clusters and 1 component".into(),
        ));
    }
    if let RemovalRule::RelativeSize { max_fraction } = cfg.rule {
        if !(max_fraction > 0.0 && max_fraction < 1.0) {
            return Err(DefenseError::InvalidArgument(format!(
                "relative size {max_fraction} outside (0, 1)"
            )));
        }
    }
    let components = cfg.components.min(model.latent_dim());
    let classes = per_class_latents(model, train)?;
    let results = par::map_indexed(classes.len(), |c| {
        let (idx, z) = &classes[c];
        if idx.len() < cfg.clusters {
            return Ok(None);
        }
        let seed = cfg.seed.wrapping_add(c as u64);
        let ica = match fastica(z, components, seed) {
            Ok(r) => r,
            Err(LinalgError::RankDeficient { .. } | LinalgError::ZeroMatrix) => return Ok(None),
            Err(e) => return Err(e),
        };
        let km = kmeans(&ica.sources, cfg.clusters, seed, cfg.restarts)?;
        let mut sizes = vec![0usize; cfg.clusters];
        let mut poisons = vec![0usize; cfg.clusters];
        for (&i, &a) in idx.iter().zip(km.partition.labels()) {
            sizes[a] += 1;
            poisons[a] += mask.flags[i] as usize;
        }
        let poison_fractions: Vec<f64> = sizes
            .iter()
            .zip(&poisons)
            .map(|(&s, &p)| if s == 0 { 0.0 } else { p as f64 / s as f64 })
            .collect();
        let removed_cluster = choose(cfg.rule, &sizes, &poison_fractions);
        let src = &ica.sources;
        let projection = (0..src.rows())
            .map(|r| [src.get(r, 0), if src.cols() > 1 { src.get(r, 1) } else { 0.0 }])
            .collect();
        Ok(Some(ClassClusters {
            label: c,
            indices: idx.clone(),
            assignment: km.partition.0,
            sizes,
            poison_fractions,
            removed_cluster,
            ica_components: ica.components,
            ica_warning: ica.has_warning(),
            projection,
        }))
    });
    let mut out = Vec::new();
    let mut removed = Vec::new();
    let mut removed_per_class = vec![0; classes.len()];
    let mut warnings = Vec::new();
    for (c, r) in results.into_iter().enumerate() {
        let Some(cc) = r? else {
            let msg = format!("class {c} could not be clustered; skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        };
        if cc.ica_warning {
            let msg = format!(
                "class {c}: ICA extracted {} of {components} components or did not converge",
                cc.ica_components
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        if let Some(k) = cc.removed_cluster {
            let m = cc.members(k);
            removed_per_class[c] = m.len();
            removed.extend(m);
        }
        out.push(cc);
    }
    removed.sort_unstable();
    let target_ari = out
        .iter()
        .find(|cc| cc.label == mask.target_label)
        .filter(|cc| cc.indices.len() >= ARI_MIN_SAMPLES)
        .and_then(|cc| {
            let truth = Partition(cc.indices.iter().map(|&i| mask.flags[i] as usize).collect());
            adjusted_rand_index(&Partition(cc.assignment.clone()), &truth).ok()
        });
    let report = FilterReport::new("cluster", removed_per_class, removed, mask, warnings);
    Ok(ClusterOutcome {
        filter: FilterOutcome::build(train, mask, report, None)?,
        classes: out,
        target_ari,
    })
}

fn choose(rule: RemovalRule, sizes: &[usize], fractions: &[f64]) -> Option<usize> {
    match rule {
        RemovalRule::HighestPoisonFraction => {
            let (best, &f) = fractions
                .iter()
                .enumerate()
                .reduce(|a, b| if b.1 > a.1 { b } else { a })?;
            (f > 0.0).then_some(best)
        }
        RemovalRule::RelativeSize { max_fraction } => {
            let total: usize = sizes.iter().sum();
            let (small, &s) = sizes.iter().enumerate().reduce(|a, b| if b.1 < a.1 { b } else { a })?;
            (s > 0 && s as f64 <= max_fraction * total as f64).then_some(small)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterVerdict {
    Poisoned,
    Legitimate,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReclassificationResult {
    pub label: usize,
    pub cluster: usize,
    pub size: usize,
    pub verdict: ClusterVerdict,
    /// Most common prediction for the cluster's samples.
    pub dominant_class: Option<usize>,
    /// Fraction predicted as some label other than `label`.
    pub foreign_fraction: Option<f64>,
}

/// Share of a cluster that has to land outside its label for a
/// `Poisoned` verdict.
const FOREIGN_THRESHOLD: f64 = 0.5;

/// Retrains without each cluster in turn via `trainer` and classifies the
/// held-out cluster with the result.
pub fn exclusionary_reclassification<F>(
    clusters: &[ClassClusters],
    train: &LabeledDataset,
    mut trainer: F,
) -> Result<Vec<ReclassificationResult>, DefenseError>
where
    F: FnMut(&LabeledDataset) -> Result<SplitClassifier, TrainError>,
{
    let mut out = Vec::new();
    for cc in clusters {
        for k in 0..cc.sizes.len() {
            let members = cc.members(k);
            let mut verdict = ReclassificationResult {
                label: cc.label,
                cluster: k,
                size: members.len(),
                verdict: ClusterVerdict::Inconclusive,
                dominant_class: None,
                foreign_fraction: None,
            };
            if members.is_empty() {
                out.push(verdict);
                continue;
            }
            let mut drop = vec![false; train.len()];
            members.iter().for_each(|&i| drop[i] = true);
            let rest: Vec<usize> = (0..train.len()).filter(|&i| !drop[i]).collect();
            let model = match trainer(&train.subset(&rest)?) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("retraining without cluster {k} of label {}: {e}", cc.label);
                    out.push(verdict);
                    continue;
                }
            };
            let pred = model.predict(&train.batch(&members))?;
            let mut counts = vec![0usize; train.num_classes];
            pred.iter().for_each(|&p| counts[p] += 1);
            let dominant = (0..counts.len()).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            let foreign = 1.0 - counts[cc.label] as f64 / members.len() as f64;
            verdict.dominant_class = Some(dominant);
            verdict.foreign_fraction = Some(foreign);
            verdict.verdict = if foreign >= FOREIGN_THRESHOLD {
                ClusterVerdict::Poisoned
            } else {
                ClusterVerdict::Legitimate
            };
            out.push(verdict);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removal_rules() {
        let r = RemovalRule::HighestPoisonFraction;
        assert_eq!(choose(r, &[10, 5], &[0.1, 0.8]), Some(1));
        assert_eq!(choose(r, &[10, 5], &[0.0, 0.0]), None);
        let r = RemovalRule::RelativeSize { max_fraction: 0.35 };
        assert_eq!(choose(r, &[70, 30], &[0.0, 0.0]), Some(1));
        assert_eq!(choose(r, &[55, 45], &[0.0, 1.0]), None);
    }
}
