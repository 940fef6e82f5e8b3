use super::config::{AttackMode, DatasetSource, DefenseKind, ExperimentConfig};
use super::manifest::{now_unix, RunManifest, StageRecord, StageStatus, MANIFEST_FILE};
use super::ExperimentError;
use crate::data::{generate_synthetic, load_cifar10_binary, make_triggered_testset, poison_dataset};
use crate::data::{LabeledDataset, PoisonMask, SyntheticTaskConfig};
use crate::defenses::{
    activation_cluster_filter, activation_diff_ranking, prune_sweep, reranked_ranking, retrain_and_measure,
    spectral_filter, spectral_histogram, FilterReport, Histogram, PruneCurve, PrunePoint,
};
use crate::nn::{
    load_classifier, save_classifier, save_discriminator, write_atomic, Discriminator, DiscriminatorSpec,
    SplitClassifier, TrainingMeta,
};
use crate::train::{
    backdoor_statistic, discriminator_accuracy, evaluate, identify_backdoor_neurons, train_adversarial_embedding,
    train_baseline, train_targeted_embedding, EvalSets, Evaluation, TrainConfig, TrainingTrace,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Synthetic test sets use the dataset seed plus this offset.
pub const TEST_SEED_OFFSET: u64 = 1000;
/// Accuracy loss (absolute) tolerated when reading off a prune curve.
pub const ACCURACY_WINDOW: f64 = 0.15;
pub const HISTOGRAM_BINS: usize = 20;

const BASELINE_CKPT: &str = "baseline.ckpt";
const ATTACKED_CKPT: &str = "attacked.ckpt";
/// Canonical copy of the configuration a run directory belongs to.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Poison,
    TrainBaseline,
    EmbedTargeted,
    EmbedAdversarial,
    DefendPrune,
    DefendSpectral,
    DefendCluster,
    Retrain,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Poison => "poison",
            Stage::TrainBaseline => "train-baseline",
            Stage::EmbedTargeted => "embed-targeted",
            Stage::EmbedAdversarial => "embed-adversarial",
            Stage::DefendPrune => "defend-prune",
            Stage::DefendSpectral => "defend-spectral",
            Stage::DefendCluster => "defend-cluster",
            Stage::Retrain => "retrain",
            Stage::Report => "report",
        }
    }

    fn of_defense(d: DefenseKind) -> Stage {
        match d {
            DefenseKind::Prune => Stage::DefendPrune,
            DefenseKind::Spectral => Stage::DefendSpectral,
            DefenseKind::Cluster => Stage::DefendCluster,
        }
    }
}

/// Clean and poisoned data of one run.
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub poisoned: LabeledDataset,
    pub mask: PoisonMask,
    /// Triggered test inputs outside the target label, labelled as target.
    pub triggered: LabeledDataset,
}

impl Datasets {
    fn sets(&self) -> EvalSets<'_> {
        EvalSets {
            clean: &self.test,
            triggered: &self.triggered,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    config_hash: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDocument {
    pub train_samples: usize,
    pub test_samples: usize,
    pub image_shape: [usize; 3],
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonDocument {
    pub rate: f64,
    pub target: usize,
    pub poisoned: Vec<usize>,
    /// Poisoned share of the samples labelled as the target.
    pub target_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub evaluation: Evaluation,
    pub epochs: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub mode: String,
    pub evaluation: Evaluation,
    pub baseline: Evaluation,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backdoor_neurons: Option<Vec<usize>>,
    /// Mean activation gap over the backdoor neurons before and after.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statistic_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statistic_after: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDocument {
    pub model: String,
    pub rerank: bool,
    pub step: f64,
    pub ranking: Vec<usize>,
    pub points: Vec<PrunePoint>,
}

impl PruneDocument {
    /// Lowest attack success among points within `window` of the
    /// unpruned accuracy.
    pub fn min_attack_success_within(&self, window: f64) -> f64 {
        let base = self.points[0].accuracy;
        self.points
            .iter()
            .filter(|p| p.accuracy >= base - window)
            .map(|p| p.attack_success)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDocument {
    pub model: String,
    pub epsilon: f64,
    #[serde(flatten)]
    pub report: FilterReport,
    /// Outlier score per training sample.
    pub scores: Vec<f64>,
    /// Scores of the target label, split by ground truth.
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassClusterSummary {
    pub label: usize,
    pub sizes: Vec<usize>,
    pub poison_fractions: Vec<f64>,
    pub removed_cluster: Option<usize>,
    pub ica_components: usize,
    pub assignment: Vec<usize>,
    pub projection: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDocument {
    pub model: String,
    #[serde(flatten)]
    pub report: FilterReport,
    pub target_ari: Option<f64>,
    pub classes: Vec<ClassClusterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainDocument {
    pub results: BTreeMap<String, Evaluation>,
}

struct StageOutput {
    files: Vec<String>,
    metrics: BTreeMap<String, f64>,
}

fn metrics<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs
        .into_iter()
        .filter(|(_, v)| v.is_finite())
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn dataset_metrics(d: &DatasetDocument) -> BTreeMap<String, f64> {
    metrics([
        ("train_samples", d.train_samples as f64),
        ("test_samples", d.test_samples as f64),
    ])
}

fn poison_metrics(d: &PoisonDocument) -> BTreeMap<String, f64> {
    metrics([
        ("poisons", d.poisoned.len() as f64),
        ("target_fraction", d.target_fraction),
    ])
}

fn baseline_metrics(d: &BaselineMetrics) -> BTreeMap<String, f64> {
    metrics([
        ("accuracy", d.evaluation.accuracy),
        ("attack_success", d.evaluation.attack_success),
        ("final_loss", d.final_loss),
    ])
}

fn attack_metrics(d: &AttackMetrics) -> BTreeMap<String, f64> {
    let mut m = metrics([
        ("accuracy", d.evaluation.accuracy),
        ("attack_success", d.evaluation.attack_success),
        ("baseline_accuracy", d.baseline.accuracy),
    ]);
    let opt = [
        ("statistic_before", d.statistic_before),
        ("statistic_after", d.statistic_after),
        ("discriminator_accuracy", d.discriminator_accuracy),
        ("backdoor_neurons", d.backdoor_neurons.as_ref().map(|v| v.len() as f64)),
    ];
    for (k, v) in opt {
        if let Some(v) = v.filter(|v| v.is_finite()) {
            m.insert(k.into(), v);
        }
    }
    m
}

fn prune_metrics(d: &PruneDocument) -> BTreeMap<String, f64> {
    let p0 = d.points[0];
    metrics([
        ("base_accuracy", p0.accuracy),
        ("base_attack_success", p0.attack_success),
        (
            "min_attack_success_within_window",
            d.min_attack_success_within(ACCURACY_WINDOW),
        ),
    ])
}

fn filter_metrics(r: &FilterReport) -> BTreeMap<String, f64> {
    metrics([
        ("removed", r.removed_count() as f64),
        ("poisons_before", r.poisons_before as f64),
        ("poisons_remaining", r.poisons_remaining as f64),
        ("poisons_left_fraction", r.remaining_fraction()),
    ])
}

fn spectral_metrics(d: &SpectralDocument) -> BTreeMap<String, f64> {
    let mut m = filter_metrics(&d.report);
    m.insert("epsilon".into(), d.epsilon);
    m
}

fn cluster_metrics(d: &ClusterDocument) -> BTreeMap<String, f64> {
    let mut m = filter_metrics(&d.report);
    if let Some(a) = d.target_ari {
        m.insert("ari".into(), a);
    }
    m
}

fn retrain_metrics(d: &RetrainDocument) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (k, e) in &d.results {
        m.insert(format!("{k}.retrained_accuracy"), e.accuracy);
        m.insert(format!("{k}.retrained_attack_success"), e.attack_success);
    }
    m
}

/// One run directory bound to one configuration.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
    data: OnceCell<Datasets>,
}

impl Run {
    /// Binds `cfg` to `dir` (the configured output directory by default).
    /// A directory whose manifest belongs to another configuration is
    /// rejected.
    pub fn open(cfg: ExperimentConfig, dir: Option<PathBuf>) -> Result<Self, ExperimentError> {
        let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
        let hash = cfg.hash();
        let run = Run {
            cfg,
            hash,
            dir,
            data: OnceCell::new(),
        };
        if let Some(m) = run.existing_manifest()? {
            if m.config_hash != run.hash {
                return Err(ExperimentError::Validation(format!(
                    "{} holds a run of config {}, not {}",
                    run.dir.display(),
                    m.config_hash,
                    run.hash
                )));
            }
        }
        Ok(run)
    }

    /// Reopens a run directory from the configuration stored in it.
    pub fn open_dir(dir: &Path) -> Result<Self, ExperimentError> {
        let p = dir.join(CONFIG_FILE);
        if !p.exists() {
            return Err(ExperimentError::Validation(format!(
                "{} is not a run directory",
                dir.display()
            )));
        }
        Run::open(ExperimentConfig::load(&p)?, Some(dir.to_path_buf()))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn existing_manifest(&self) -> Result<Option<RunManifest>, ExperimentError> {
        let p = self.path(MANIFEST_FILE);
        if p.exists() {
            RunManifest::load(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn manifest(&self) -> Result<RunManifest, ExperimentError> {
        Ok(self
            .existing_manifest()?
            .unwrap_or_else(|| RunManifest::new(&self.hash)))
    }

    pub fn datasets(&self) -> Result<&Datasets, ExperimentError> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let d = build_datasets(&self.cfg)?;
        Ok(self.data.get_or_init(|| d))
    }

    fn write_json<T: Serialize>(&self, name: &str, body: T) -> Result<String, ExperimentError> {
        let doc = Stamped {
            config_hash: self.hash.clone(),
            body,
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
        text.push('\n');
        write_atomic(&self.path(name), text.as_bytes())?;
        Ok(name.to_string())
    }

    fn write_csv(&self, name: &str, body: &str) -> Result<String, ExperimentError> {
        let text = format!("# config_hash: {}\n{body}", self.hash);
        write_atomic(&self.path(name), text.as_bytes())?;
        Ok(name.to_string())
    }

    /// Reads a stage document, checking it belongs to this configuration.
    pub fn read_json<T: DeserializeOwned>(&self, name: &str, producer: Stage) -> Result<T, ExperimentError> {
        let p = self.path(name);
        let text = std::fs::read_to_string(&p).map_err(|_| {
            ExperimentError::Validation(format!("missing {}; run `{}` first", p.display(), producer.name()))
        })?;
        let doc: Stamped<T> = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Runtime(format!("malformed {}: {e}", p.display())))?;
        self.check_hash(&p, &doc.config_hash)?;
        Ok(doc.body)
    }

    fn check_hash(&self, p: &Path, found: &str) -> Result<(), ExperimentError> {
        if found != self.hash {
            return Err(ExperimentError::Validation(format!(
                "{} was produced by config {found}, not {}",
                p.display(),
                self.hash
            )));
        }
        Ok(())
    }

    fn load_model(&self, name: &str, producer: Stage) -> Result<SplitClassifier, ExperimentError> {
        let p = self.path(name);
        if !p.exists() {
            return Err(ExperimentError::Validation(format!(
                "missing checkpoint {}; run `{}` first",
                p.display(),
                producer.name()
            )));
        }
        let (m, meta) = load_classifier(&p, Some(&self.cfg.arch()))?;
        self.check_hash(&p, &meta.config_hash)?;
        Ok(m)
    }

    /// Model the defenses inspect: the attacked one when an attack is
    /// configured, the baseline otherwise.
    fn subject(&self) -> Result<(SplitClassifier, &'static str), ExperimentError> {
        Ok(match self.cfg.attack.mode {
            AttackMode::None => (self.load_model(BASELINE_CKPT, Stage::TrainBaseline)?, "baseline"),
            AttackMode::Targeted => (self.load_model(ATTACKED_CKPT, Stage::EmbedTargeted)?, "targeted"),
            AttackMode::Adversarial => (self.load_model(ATTACKED_CKPT, Stage::EmbedAdversarial)?, "adversarial"),
        })
    }

    fn meta(&self, cfg: &TrainConfig) -> TrainingMeta {
        let hyper = self
            .cfg
            .canonical_entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("train.") || k.starts_with("attack."))
            .collect();
        TrainingMeta {
            epoch: cfg.epochs,
            seed: cfg.seed,
            hyper,
            config_hash: self.hash.clone(),
        }
    }

    /// Runs one stage and records it in the manifest. On failure the
    /// record is marked failed and the error names the stage.
    pub fn execute(&self, stage: Stage) -> Result<StageRecord, ExperimentError> {
        std::fs::create_dir_all(&self.dir)?;
        let cfg_path = self.path(CONFIG_FILE);
        if !cfg_path.exists() {
            write_atomic(&cfg_path, self.cfg.canonical_text().as_bytes())?;
        }
        let started = now_unix();
        log::info!("stage {} ({})", stage.name(), self.dir.display());
        let result = self.dispatch(stage);
        let mut manifest = self.manifest()?;
        let (rec, out) = match result {
            Ok(o) => (
                StageRecord {
                    name: stage.name().into(),
                    status: StageStatus::Completed,
                    started_unix: started,
                    finished_unix: now_unix(),
                    files: o.files,
                    metrics: o.metrics,
                    error: None,
                },
                Ok(()),
            ),
            Err(e) => {
                let msg = e.to_string();
                log::error!("stage {} failed: {msg}", stage.name());
                let err = match e {
                    ExperimentError::Validation(m) => ExperimentError::Validation(format!("{}: {m}", stage.name())),
                    other => ExperimentError::Stage {
                        stage: stage.name().into(),
                        message: other.to_string(),
                    },
                };
                (
                    StageRecord {
                        name: stage.name().into(),
                        status: StageStatus::Failed,
                        started_unix: started,
                        finished_unix: now_unix(),
                        files: Vec::new(),
                        metrics: BTreeMap::new(),
                        error: Some(msg),
                    },
                    Err(err),
                )
            }
        };
        manifest.record(rec.clone());
        manifest.save(&self.path(MANIFEST_FILE))?;
        out.map(|_| rec)
    }

    /// Stages `run` executes for this configuration, in order.
    pub fn plan(&self) -> Vec<Stage> {
        let mut s = vec![Stage::Data, Stage::Poison, Stage::TrainBaseline];
        match self.cfg.attack.mode {
            AttackMode::None => {}
            AttackMode::Targeted => s.push(Stage::EmbedTargeted),
            AttackMode::Adversarial => s.push(Stage::EmbedAdversarial),
        }
        let d = &self.cfg.defenses;
        s.extend(d.list.iter().map(|&k| Stage::of_defense(k)));
        if d.retrain && d.list.iter().any(|&k| k != DefenseKind::Prune) {
            s.push(Stage::Retrain);
        }
        s.push(Stage::Report);
        s
    }

    /// Every planned stage in order, stopping at the first failure.
    pub fn run_all(&self) -> Result<RunManifest, ExperimentError> {
        std::fs::create_dir_all(&self.dir)?;
        RunManifest::new(&self.hash).save(&self.path(MANIFEST_FILE))?;
        for stage in self.plan() {
            self.execute(stage)?;
        }
        self.manifest()
    }

    fn dispatch(&self, stage: Stage) -> Result<StageOutput, ExperimentError> {
        match stage {
            Stage::Data => self.stage_data(),
            Stage::Poison => self.stage_poison(),
            Stage::TrainBaseline => self.stage_baseline(),
            Stage::EmbedTargeted => self.stage_targeted(),
            Stage::EmbedAdversarial => self.stage_adversarial(),
            Stage::DefendPrune => self.stage_prune(),
            Stage::DefendSpectral => self.stage_spectral(),
            Stage::DefendCluster => self.stage_cluster(),
            Stage::Retrain => self.stage_retrain(),
            Stage::Report => self.stage_report(),
        }
    }

    fn stage_data(&self) -> Result<StageOutput, ExperimentError> {
        let d = self.datasets()?;
        let doc = DatasetDocument {
            train_samples: d.train.len(),
            test_samples: d.test.len(),
            image_shape: d.train.image_shape(),
            train_class_counts: d.train.class_counts(),
            test_class_counts: d.test.class_counts(),
        };
        Ok(StageOutput {
            metrics: dataset_metrics(&doc),
            files: vec![self.write_json("dataset.json", &doc)?],
        })
    }

    fn poison_document(&self) -> Result<PoisonDocument, ExperimentError> {
        let d = self.datasets()?;
        Ok(PoisonDocument {
            rate: self.cfg.poison.rate,
            target: self.cfg.poison.target,
            poisoned: d.mask.indices(),
            target_fraction: d.mask.fraction_in_label(&d.poisoned.labels, self.cfg.poison.target),
        })
    }

    fn stage_poison(&self) -> Result<StageOutput, ExperimentError> {
        let doc = self.poison_document()?;
        Ok(StageOutput {
            metrics: poison_metrics(&doc),
            files: vec![self.write_json("poison.json", &doc)?],
        })
    }

    fn stage_baseline(&self) -> Result<StageOutput, ExperimentError> {
        let d = self.datasets()?;
        let cfg = &self.cfg.train;
        let model = SplitClassifier::build(&self.cfg.arch())?;
        let (model, trace) = train_baseline(model, &d.poisoned, cfg, Some(d.sets()))?;
        let doc = BaselineMetrics {
            evaluation: evaluate(&model, &d.test, &d.triggered)?,
            epochs: cfg.epochs,
            final_loss: trace.epochs.last().map(|r| r.loss).unwrap_or(0.0),
        };
        save_classifier(&model, &self.meta(cfg), &self.path(BASELINE_CKPT))?;
        Ok(StageOutput {
            metrics: baseline_metrics(&doc),
            files: vec![
                BASELINE_CKPT.into(),
                self.write_csv("baseline_trace.csv", &trace.to_csv())?,
                self.write_json("baseline_metrics.json", &doc)?,
            ],
        })
    }

    fn require_mode(&self, mode: AttackMode) -> Result<(), ExperimentError> {
        if self.cfg.attack.mode != mode {
            return Err(ExperimentError::Validation(format!(
                "config has attack.mode = {}, expected {}",
                self.cfg.attack.mode.name(),
                mode.name()
            )));
        }
        Ok(())
    }

    fn finish_attack(
        &self,
        model: &SplitClassifier,
        trace: &TrainingTrace,
        doc: AttackMetrics,
        mut files: Vec<String>,
    ) -> Result<StageOutput, ExperimentError> {
        save_classifier(model, &self.meta(&self.cfg.attack.train), &self.path(ATTACKED_CKPT))?;
        files.insert(0, ATTACKED_CKPT.into());
        files.push(self.write_csv("attack_trace.csv", &trace.to_csv())?);
        files.push(self.write_json("attack_metrics.json", &doc)?);
        Ok(StageOutput {
            metrics: attack_metrics(&doc),
            files,
        })
    }

    fn stage_targeted(&self) -> Result<StageOutput, ExperimentError> {
        self.require_mode(AttackMode::Targeted)?;
        let baseline = self.load_model(BASELINE_CKPT, Stage::TrainBaseline)?;
        let d = self.datasets()?;
        let a = &self.cfg.attack;
        let nb = identify_backdoor_neurons(&baseline, &d.test, &d.triggered, a.accuracy_drop)?;
        if nb.exhausted {
            log::warn!("every latent neuron pruned before the accuracy drop was reached");
        }
        let before = backdoor_statistic(&baseline, &d.test, &d.triggered, &nb.indices)?;
        let (model, trace) = train_targeted_embedding(&baseline, &nb, &d.poisoned, &a.train, Some(d.sets()))?;
        let doc = AttackMetrics {
            mode: a.mode.name().into(),
            evaluation: evaluate(&model, &d.test, &d.triggered)?,
            baseline: evaluate(&baseline, &d.test, &d.triggered)?,
            epochs: a.train.epochs,
            statistic_after: Some(backdoor_statistic(&model, &d.test, &d.triggered, &nb.indices)?),
            statistic_before: Some(before),
            backdoor_neurons: Some(nb.indices),
            discriminator_accuracy: None,
        };
        self.finish_attack(&model, &trace, doc, Vec::new())
    }

    fn stage_adversarial(&self) -> Result<StageOutput, ExperimentError> {
        self.require_mode(AttackMode::Adversarial)?;
        let baseline = self.load_model(BASELINE_CKPT, Stage::TrainBaseline)?;
        let d = self.datasets()?;
        let a = &self.cfg.attack;
        let disc = Discriminator::build(&DiscriminatorSpec {
            latent_dim: self.cfg.model.latent_dim,
            hidden: a.disc_hidden.clone(),
            seed: a.train.seed,
        })?;
        let base_eval = evaluate(&baseline, &d.test, &d.triggered)?;
        let out = train_adversarial_embedding(baseline, disc, &d.poisoned, &d.mask, &a.train, Some(d.sets()))?;
        let doc = AttackMetrics {
            mode: a.mode.name().into(),
            evaluation: evaluate(&out.model, &d.test, &d.triggered)?,
            baseline: base_eval,
            epochs: a.train.epochs,
            backdoor_neurons: None,
            statistic_before: None,
            statistic_after: None,
            discriminator_accuracy: Some(discriminator_accuracy(
                &out.model,
                &out.discriminator,
                &d.test,
                &d.triggered,
            )?),
        };
        save_discriminator(
            &out.discriminator,
            &self.meta(&a.train),
            &self.path("discriminator.ckpt"),
        )?;
        self.finish_attack(&out.model, &out.trace, doc, vec!["discriminator.ckpt".into()])
    }

    fn stage_prune(&self) -> Result<StageOutput, ExperimentError> {
        let (model, name) = self.subject()?;
        let d = self.datasets()?;
        let step = self.cfg.defenses.prune_step;
        let rerank = self.cfg.defenses.prune_rerank;
        let ranking = if rerank {
            let chunk = ((step * model.latent_dim() as f64).round() as usize).max(1);
            reranked_ranking(&model, &d.test, &d.triggered, chunk)?
        } else {
            activation_diff_ranking(&model, &d.test, &d.triggered)?
        };
        let curve = prune_sweep(&model, &ranking, &d.test, &d.triggered, step)?;
        let doc = PruneDocument {
            model: name.into(),
            rerank,
            step,
            ranking,
            points: curve.points.clone(),
        };
        Ok(StageOutput {
            metrics: prune_metrics(&doc),
            files: vec![
                self.write_csv("prune_curve.csv", &curve.to_csv())?,
                self.write_json("prune_report.json", &doc)?,
            ],
        })
    }

    fn stage_spectral(&self) -> Result<StageOutput, ExperimentError> {
        let (model, name) = self.subject()?;
        let d = self.datasets()?;
        let epsilon = match self.cfg.defenses.epsilon {
            Some(e) => e,
            None => d.mask.fraction_in_label(&d.poisoned.labels, self.cfg.poison.target),
        };
        let out = spectral_filter(&model, &d.poisoned, &d.mask, epsilon)?;
        let scores = out.scores.unwrap_or_default();
        let target = d.poisoned.indices_of_label(self.cfg.poison.target);
        let histogram = spectral_histogram(
            &target.iter().map(|&i| scores[i]).collect::<Vec<_>>(),
            &target.iter().map(|&i| d.mask.flags[i]).collect::<Vec<_>>(),
            HISTOGRAM_BINS,
        )?;
        let doc = SpectralDocument {
            model: name.into(),
            epsilon,
            report: out.report,
            scores,
            histogram,
        };
        Ok(StageOutput {
            metrics: spectral_metrics(&doc),
            files: vec![
                self.write_csv("spectral_histogram.csv", &doc.histogram.to_csv())?,
                self.write_json("spectral_report.json", &doc)?,
            ],
        })
    }

    fn stage_cluster(&self) -> Result<StageOutput, ExperimentError> {
        let (model, name) = self.subject()?;
        let d = self.datasets()?;
        let out = activation_cluster_filter(&model, &d.poisoned, &d.mask, &self.cfg.defenses.cluster)?;
        let doc = ClusterDocument {
            model: name.into(),
            report: out.filter.report,
            target_ari: out.target_ari,
            classes: out
                .classes
                .into_iter()
                .map(|c| ClassClusterSummary {
                    label: c.label,
                    sizes: c.sizes,
                    poison_fractions: c.poison_fractions,
                    removed_cluster: c.removed_cluster,
                    ica_components: c.ica_components,
                    assignment: c.assignment,
                    projection: c.projection,
                })
                .collect(),
        };
        Ok(StageOutput {
            metrics: cluster_metrics(&doc),
            files: vec![self.write_json("cluster_report.json", &doc)?],
        })
    }

    fn stage_retrain(&self) -> Result<StageOutput, ExperimentError> {
        let d = self.datasets()?;
        let list = &self.cfg.defenses.list;
        if !list.iter().any(|&k| k != DefenseKind::Prune) {
            return Err(ExperimentError::Validation(
                "retraining needs the spectral or cluster defense in defense.list".into(),
            ));
        }
        let arch = self.cfg.arch();
        let mut results = BTreeMap::new();
        let mut files = Vec::new();
        let retrain = |removed: &[usize]| -> Result<Evaluation, ExperimentError> {
            let mut drop = vec![false; d.poisoned.len()];
            for &i in removed {
                if i >= drop.len() {
                    return Err(ExperimentError::Runtime(format!("removed index {i} out of range")));
                }
                drop[i] = true;
            }
            let kept: Vec<usize> = (0..drop.len()).filter(|&i| !drop[i]).collect();
            let filtered = d.poisoned.subset(&kept)?;
            Ok(retrain_and_measure(&filtered, &arch, &self.cfg.train, &d.test, &d.triggered)?.1)
        };
        if list.contains(&DefenseKind::Spectral) {
            let mut doc: SpectralDocument = self.read_json("spectral_report.json", Stage::DefendSpectral)?;
            let e = retrain(&doc.report.removed)?;
            doc.report.retrained = Some(e);
            files.push(self.write_json("spectral_report.json", &doc)?);
            results.insert("spectral".to_string(), e);
        }
        if list.contains(&DefenseKind::Cluster) {
            let mut doc: ClusterDocument = self.read_json("cluster_report.json", Stage::DefendCluster)?;
            let e = retrain(&doc.report.removed)?;
            doc.report.retrained = Some(e);
            files.push(self.write_json("cluster_report.json", &doc)?);
            results.insert("cluster".to_string(), e);
        }
        let doc = RetrainDocument { results };
        files.push(self.write_json("retrain_metrics.json", &doc)?);
        Ok(StageOutput {
            metrics: retrain_metrics(&doc),
            files,
        })
    }

    /// Rebuilds `summary.csv`, `prune_curve.csv` and the spectral
    /// histogram from the stage documents already on disk.
    fn stage_report(&self) -> Result<StageOutput, ExperimentError> {
        let manifest = self.manifest()?;
        let mut rows: Vec<(String, String, f64, String)> = Vec::new();
        let mut files = Vec::new();
        let mut push = |stage: Stage, file: &str, m: BTreeMap<String, f64>| {
            for (k, v) in m {
                rows.push((stage.name().into(), k, v, file.into()));
            }
        };
        let done = |s: Stage| {
            manifest
                .stage(s.name())
                .is_some_and(|r| r.status == StageStatus::Completed)
        };
        if done(Stage::Data) {
            push(
                Stage::Data,
                "dataset.json",
                dataset_metrics(&self.read_json("dataset.json", Stage::Data)?),
            );
        }
        if done(Stage::Poison) {
            push(
                Stage::Poison,
                "poison.json",
                poison_metrics(&self.read_json("poison.json", Stage::Poison)?),
            );
        }
        if done(Stage::TrainBaseline) {
            let f = "baseline_metrics.json";
            push(
                Stage::TrainBaseline,
                f,
                baseline_metrics(&self.read_json(f, Stage::TrainBaseline)?),
            );
        }
        for s in [Stage::EmbedTargeted, Stage::EmbedAdversarial] {
            if done(s) {
                push(
                    s,
                    "attack_metrics.json",
                    attack_metrics(&self.read_json("attack_metrics.json", s)?),
                );
            }
        }
        if done(Stage::DefendPrune) {
            let doc: PruneDocument = self.read_json("prune_report.json", Stage::DefendPrune)?;
            let curve = PruneCurve {
                points: doc.points.clone(),
            };
            files.push(self.write_csv("prune_curve.csv", &curve.to_csv())?);
            push(Stage::DefendPrune, "prune_report.json", prune_metrics(&doc));
        }
        if done(Stage::DefendSpectral) {
            let doc: SpectralDocument = self.read_json("spectral_report.json", Stage::DefendSpectral)?;
            files.push(self.write_csv("spectral_histogram.csv", &doc.histogram.to_csv())?);
            push(Stage::DefendSpectral, "spectral_report.json", spectral_metrics(&doc));
        }
        if done(Stage::DefendCluster) {
            let doc: ClusterDocument = self.read_json("cluster_report.json", Stage::DefendCluster)?;
            push(Stage::DefendCluster, "cluster_report.json", cluster_metrics(&doc));
        }
        if done(Stage::Retrain) {
            let f = "retrain_metrics.json";
            push(Stage::Retrain, f, retrain_metrics(&self.read_json(f, Stage::Retrain)?));
        }
        if rows.is_empty() {
            return Err(ExperimentError::Validation(format!(
                "{} has no completed stages to report",
                self.dir.display()
            )));
        }
        let mut csv = String::from("stage,metric,value,source\n");
        for (s, k, v, f) in &rows {
            csv.push_str(&format!("{s},{k},{v},{f}\n"));
        }
        files.push(self.write_csv("summary.csv", &csv)?);
        Ok(StageOutput {
            files,
            metrics: BTreeMap::new(),
        })
    }
}

fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets, ExperimentError> {
    let (train, test) = match &cfg.dataset {
        DatasetSource::Synthetic { task, test_per_class } => {
            let test_cfg = SyntheticTaskConfig {
                samples_per_class: *test_per_class,
                seed: task.seed.wrapping_add(TEST_SEED_OFFSET),
                ..task.clone()
            };
            (generate_synthetic(task), generate_synthetic(&test_cfg))
        }
        DatasetSource::Cifar { train, test } => (load_cifar10_binary(train)?, load_cifar10_binary(test)?),
    };
    let (poisoned, mask) = poison_dataset(&train, cfg.poison.rate, cfg.poison.target, cfg.poison.seed)?;
    let triggered = make_triggered_testset(&test, cfg.poison.target)?;
    Ok(Datasets {
        train,
        test,
        poisoned,
        mask,
        triggered,
    })
}
