use super::{per_class_latents, DefenseError, FilterOutcome, FilterReport};
use crate::data::{LabeledDataset, PoisonMask};
use crate::linalg::{top_singular_vector, LinalgError, Matrix};
use crate::nn::SplitClassifier;
use crate::par;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Squared projections of the centered rows onto their top singular
/// direction. Identical rows have no direction and all score 0.
pub fn spectral_scores(latents: &Matrix) -> Result<Vec<f64>, DefenseError> {
    let centered = latents.centered();
    let v = match top_singular_vector(&centered) {
        Ok(v) => v,
        Err(LinalgError::ZeroMatrix) => return Ok(vec![0.0; centered.rows()]),
        Err(e) => return Err(e.into()),
    };
    Ok((0..centered.rows())
        .map(|i| {
            let p: f64 = centered.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
            p * p
        })
        .collect())
}

/// Samples removed from a class of `n` samples.
pub fn removal_budget(epsilon: f64, n: usize) -> usize {
    ((1.5 * epsilon * n as f64).round() as usize).min(n)
}

/// Spectral-signature filtering. Within every label, the
/// `round(1.5·ε·n_L)` highest-scoring samples are removed. `mask` is read
/// only to fill in the report.
pub fn spectral_filter(
    model: &SplitClassifier,
    train: &LabeledDataset,
    mask: &PoisonMask,
    epsilon: f64,
) -> Result<FilterOutcome, DefenseError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(DefenseError::InvalidArgument(format!(
            "epsilon {epsilon} outside (0, 0.5)"
        )));
    }
    if mask.len() != train.len() {
        return Err(DefenseError::InvalidArgument("mask length differs from dataset".into()));
    }
    let classes = per_class_latents(model, train)?;
    let per_class = par::map_indexed(classes.len(), |c| {
        let (idx, z) = &classes[c];
        if idx.len() < 2 {
            return Ok((Vec::new(), vec![0.0; idx.len()], true));
        }
        let scores = spectral_scores(z)?;
        let mut order: Vec<usize> = (0..idx.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let k = removal_budget(epsilon, idx.len());
        let removed: Vec<usize> = order[..k].iter().map(|&j| idx[j]).collect();
        Ok::<_, DefenseError>((removed, scores, false))
    });
    let mut removed = Vec::new();
    let mut removed_per_class = Vec::with_capacity(classes.len());
    let mut scores = vec![0.0; train.len()];
    let mut warnings = Vec::new();
    for (c, r) in per_class.into_iter().enumerate() {
        let (rem, s, skipped) = r?;
        if skipped {
            let msg = format!("class {c} has fewer than 2 samples; skipped");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        for (&i, v) in classes[c].0.iter().zip(s) {
            scores[i] = v;
        }
        removed_per_class.push(rem.len());
        removed.extend(rem);
    }
    removed.sort_unstable();
    let report = FilterReport::new("spectral", removed_per_class, removed, mask, warnings);
    FilterOutcome::build(train, mask, report, Some(scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub clean: usize,
    pub poison: usize,
}

/// Clean and poisoned score counts over a shared bin range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,clean_count,poison_count\n");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{},{}", b.low, b.high, b.clean, b.poison);
        }
        s
    }

    /// Bin holding `v` (clamped to the range).
    pub fn bin_of(&self, v: f64) -> usize {
        let lo = self.bins[0].low;
        let hi = self.bins[self.bins.len() - 1].high;
        bin_index(v, lo, hi, self.bins.len())
    }
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

pub fn spectral_histogram(scores: &[f64], poisoned: &[bool], bins: usize) -> Result<Histogram, DefenseError> {
    if bins < 2 {
        return Err(DefenseError::InvalidArgument("histogram needs at least 2 bins".into()));
    }
    if scores.len() != poisoned.len() || scores.is_empty() {
        return Err(DefenseError::InvalidArgument("scores and flags must align".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            low: lo + b as f64 * width,
            high: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            clean: 0,
            poison: 0,
        })
        .collect();
    for (&s, &p) in scores.iter().zip(poisoned) {
        let b = bin_index(s, lo, hi, bins);
        if p {
            out[b].poison += 1;
        } else {
            out[b].clean += 1;
        }
    }
    Ok(Histogram { bins: out })
}
