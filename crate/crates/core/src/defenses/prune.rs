use super::DefenseError;
use crate::data::LabeledDataset;
use crate::nn::{argmax_rows, PruneMask, SplitClassifier};
use crate::par;
use crate::tensor::Tensor;
use crate::train::fraction_matching;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Column means of a `[n, d]` latent tensor.
pub fn latent_means(z: &Tensor) -> Vec<f64> {
    let d = z.shape()[1];
    let n = z.shape()[0] as f64;
    let mut m = vec![0.0; d];
    for row in z.data().chunks(d) {
        m.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Neuron indices by decreasing `|clean[n] − triggered[n]|`, ties by index.
pub fn ranking_from_means(clean: &[f64], triggered: &[f64]) -> Vec<usize> {
    let diff: Vec<f64> = clean.iter().zip(triggered).map(|(a, b)| (a - b).abs()).collect();
    let mut order: Vec<usize> = (0..diff.len()).collect();
    order.sort_by(|&a, &b| diff[b].total_cmp(&diff[a]));
    order
}

pub fn activation_diff_ranking(
    model: &SplitClassifier,
    clean: &LabeledDataset,
    triggered: &LabeledDataset,
) -> Result<Vec<usize>, DefenseError> {
    if clean.is_empty() || triggered.is_empty() {
        return Err(DefenseError::InvalidArgument("ranking needs non-empty sets".into()));
    }
    let zc = model.extract_latents(&clean.images)?;
    let zt = model.extract_latents(&triggered.images)?;
    Ok(ranking_from_means(&latent_means(&zc), &latent_means(&zt)))
}

/// Ranking rebuilt on the pruned model after every `chunk` neurons: each
/// round measures the current model and appends the `chunk` unpruned
/// neurons with the largest mean difference.
pub fn reranked_ranking(
    model: &SplitClassifier,
    clean: &LabeledDataset,
    triggered: &LabeledDataset,
    chunk: usize,
) -> Result<Vec<usize>, DefenseError> {
    if chunk == 0 {
        return Err(DefenseError::InvalidArgument(
            "re-ranking chunk must be positive".into(),
        ));
    }
    let dim = model.latent_dim();
    let mut current = model.clone();
    let mut mask = model.prune.clone().unwrap_or_else(|| PruneMask::none(dim));
    let mut order = Vec::with_capacity(dim);
    while order.len() < dim {
        current.prune = Some(mask.clone());
        let full = activation_diff_ranking(&current, clean, triggered)?;
        let picked: Vec<usize> = full.into_iter().filter(|n| !order.contains(n)).take(chunk).collect();
        for &n in &picked {
            mask.0[n] = true;
        }
        order.extend(picked);
    }
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    /// Fraction of latent neurons pruned.
    pub ratio: f64,
    pub accuracy: f64,
    pub attack_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneCurve {
    pub points: Vec<PrunePoint>,
}

impl PruneCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ratio,accuracy,attack_success\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.ratio, p.accuracy, p.attack_success);
        }
        s
    }
}

/// Cumulative pruning in `ranking` order evaluated every `step` of the
/// latent width, from 0 up to and including full pruning.
///
/// The latent layer is masked at its output, so latents are computed once
/// and only the head is re-run per point; the model itself is not touched.
pub fn prune_sweep(
    model: &SplitClassifier,
    ranking: &[usize],
    clean: &LabeledDataset,
    triggered: &LabeledDataset,
    step: f64,
) -> Result<PruneCurve, DefenseError> {
    let dim = model.latent_dim();
    let mut seen = vec![false; dim];
    if ranking.len() != dim
        || ranking
            .iter()
            .any(|&n| n >= dim || std::mem::replace(&mut seen[n], true))
    {
        return Err(DefenseError::InvalidArgument(format!(
            "ranking must be a permutation of 0..{dim}"
        )));
    }
    let steps = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || (steps * step - 1.0).abs() > 1e-9 {
        return Err(DefenseError::InvalidArgument(format!(
            "step {step} does not divide the sweep evenly"
        )));
    }
    let steps = steps as usize;
    if clean.is_empty() || triggered.is_empty() {
        return Err(DefenseError::InvalidArgument("empty evaluation set".into()));
    }
    let zc = model.extract_latents(&clean.images)?;
    let zt = model.extract_latents(&triggered.images)?;
    let base = model.prune.clone().unwrap_or_else(|| PruneMask::none(dim));
    let points = par::map_indexed(steps + 1, |i| {
        let ratio = i as f64 / steps as f64;
        let count = (ratio * dim as f64).round() as usize;
        let mut mask = base.clone();
        for &n in &ranking[..count] {
            mask.0[n] = true;
        }
        let acc = argmax_rows(&model.head_logits(&zc, Some(&mask))?, model.num_classes());
        let asr = argmax_rows(&model.head_logits(&zt, Some(&mask))?, model.num_classes());
        Ok::<_, DefenseError>(PrunePoint {
            ratio,
            accuracy: fraction_matching(&acc, &clean.labels),
            attack_success: fraction_matching(&asr, &triggered.labels),
        })
    });
    Ok(PruneCurve {
        points: points.into_iter().collect::<Result<_, _>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_ranking() {
        assert_eq!(ranking_from_means(&[1.0, 5.0, 2.0], &[1.0, 0.0, 2.5]), vec![1, 2, 0]);
        assert_eq!(ranking_from_means(&[0.3; 5], &[0.3; 5]), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn reranking_matches_static_under_output_masking() {
        use crate::data::{generate_synthetic, make_triggered_testset, SyntheticTaskConfig};
        use crate::nn::ArchSpec;
        let d = generate_synthetic(&SyntheticTaskConfig {
            samples_per_class: 4,
            ..Default::default()
        });
        let trig = make_triggered_testset(&d, 2).unwrap();
        let spec = ArchSpec {
            latent_dim: 12,
            ..Default::default()
        };
        let m = SplitClassifier::build(&spec).unwrap();
        let fixed = activation_diff_ranking(&m, &d, &trig).unwrap();
        assert_eq!(reranked_ranking(&m, &d, &trig, 1).unwrap(), fixed);
        assert_eq!(reranked_ranking(&m, &d, &trig, 5).unwrap(), fixed);
        assert!(reranked_ranking(&m, &d, &trig, 0).is_err());
    }

    #[test]
    fn means() {
        let z = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(latent_means(&z), vec![2.0, 4.0]);
    }
}
