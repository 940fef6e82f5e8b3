use super::manifest::{RunManifest, StageStatus};
use super::ExperimentError;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub defense: String,
    pub metric: String,
    pub baseline: Option<f64>,
    pub attacked: Option<f64>,
}

impl ComparisonRow {
    pub fn delta(&self) -> Option<f64> {
        Some(self.attacked? - self.baseline?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub baseline_hash: String,
    pub attacked_hash: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = format!(
            "# baseline_hash: {} attacked_hash: {}\ndefense,metric,baseline,attacked,delta\n",
            self.baseline_hash, self.attacked_hash
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.defense,
                r.metric,
                opt(r.baseline),
                opt(r.attacked),
                opt(r.delta())
            );
        }
        s
    }

    pub fn row(&self, defense: &str, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.defense == defense && r.metric == metric)
    }
}

/// Defense metrics keyed by `(defense, metric)`. Retraining results are
/// filed under the defense whose filtered set was retrained.
fn defense_metrics(m: &RunManifest) -> (BTreeSet<String>, BTreeMap<(String, String), f64>) {
    let mut defenses = BTreeSet::new();
    let mut out = BTreeMap::new();
    for s in m.stages.iter().filter(|s| s.status == StageStatus::Completed) {
        if let Some(d) = s.name.strip_prefix("defend-") {
            defenses.insert(d.to_string());
            for (k, &v) in &s.metrics {
                out.insert((d.to_string(), k.clone()), v);
            }
        } else if s.name == "retrain" {
            for (k, &v) in &s.metrics {
                if let Some((d, metric)) = k.split_once('.') {
                    out.insert((d.to_string(), metric.to_string()), v);
                }
            }
        }
    }
    (defenses, out)
}

/// Side-by-side defense metrics of two runs.
pub fn compare(baseline: &RunManifest, attacked: &RunManifest) -> Result<ComparisonTable, ExperimentError> {
    let (da, ma) = defense_metrics(baseline);
    let (db, mb) = defense_metrics(attacked);
    if da != db {
        return Err(ExperimentError::Validation(format!(
            "runs used different defenses: {da:?} vs {db:?}"
        )));
    }
    if da.is_empty() {
        return Err(ExperimentError::Validation("neither run completed a defense".into()));
    }
    let keys: BTreeSet<&(String, String)> = ma.keys().chain(mb.keys()).collect();
    let rows = keys
        .into_iter()
        .map(|k| ComparisonRow {
            defense: k.0.clone(),
            metric: k.1.clone(),
            baseline: ma.get(k).copied(),
            attacked: mb.get(k).copied(),
        })
        .collect();
    Ok(ComparisonTable {
        baseline_hash: baseline.config_hash.clone(),
        attacked_hash: attacked.config_hash.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::StageRecord;

    fn manifest(defenses: &[&str], ari: f64) -> RunManifest {
        let mut m = RunManifest::new("h");
        for d in defenses {
            m.record(StageRecord {
                name: format!("defend-{d}"),
                status: StageStatus::Completed,
                started_unix: 0,
                finished_unix: 0,
                files: Vec::new(),
                metrics: [("ari".to_string(), ari)].into_iter().collect(),
                error: None,
            });
        }
        m.record(StageRecord {
            name: "retrain".into(),
            status: StageStatus::Completed,
            started_unix: 0,
            finished_unix: 0,
            files: Vec::new(),
            metrics: [("cluster.retrained_attack_success".to_string(), 0.25)]
                .into_iter()
                .collect(),
            error: None,
        });
        m
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let m = manifest(&["cluster", "spectral"], 0.9);
        let t = compare(&m, &m).unwrap();
        assert!(!t.rows.is_empty());
        assert!(t.rows.iter().all(|r| r.delta() == Some(0.0)));
        assert!(t.row("cluster", "retrained_attack_success").is_some());
    }

    #[test]
    fn delta_is_attacked_minus_baseline() {
        let t = compare(&manifest(&["cluster"], 0.9), &manifest(&["cluster"], 0.1)).unwrap();
        let r = t.row("cluster", "ari").unwrap();
        assert!((r.delta().unwrap() + 0.8).abs() < 1e-12);
        assert!(t.to_csv().lines().nth(1).unwrap() == "defense,metric,baseline,attacked,delta");
    }

    #[test]
    fn defense_mismatch_rejected() {
        assert!(compare(&manifest(&["cluster"], 0.9), &manifest(&["spectral"], 0.9)).is_err());
    }
}
