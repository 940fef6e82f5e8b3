use backdoor_lab::experiment::{
    compare, file_hash, ExperimentConfig, ExperimentError, Run, RunManifest, Stage, StageStatus, MANIFEST_FILE,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const TINY: &str = "
dataset.train_per_class = 24
dataset.test_per_class = 10
dataset.size = 12
dataset.seed = 5
poison.rate = 0.1
poison.seed = 5
model.conv_channels = 4
model.latent_dim = 12
model.seed = 5
train.epochs = 2
train.seed = 5
defense.cluster_restarts = 10
defense.prune_step = 0.25
";

fn config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{TINY}{extra}")).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn run(cfg: ExperimentConfig, dir: PathBuf) -> (Run, RunManifest) {
    let r = Run::open(cfg, Some(dir)).unwrap();
    let m = r.run_all().unwrap();
    (r, m)
}

#[test]
fn spectral_only_run_lists_checkpoint_report_and_retraining() {
    let tmp = tempfile::tempdir().unwrap();
    let (r, m) = run(config("defense.list = spectral\n"), tmp.path().join("a"));
    let names: Vec<&str> = m.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "data",
            "poison",
            "train-baseline",
            "defend-spectral",
            "retrain",
            "report"
        ]
    );
    assert!(m.stages.iter().all(|s| s.status == StageStatus::Completed));
    assert!(!m.partial);
    let listed: Vec<&str> = m
        .stages
        .iter()
        .flat_map(|s| s.files.iter().map(String::as_str))
        .collect();
    for f in [
        "baseline.ckpt",
        "spectral_report.json",
        "retrain_metrics.json",
        "summary.csv",
    ] {
        assert!(listed.contains(&f), "{f} not in manifest");
    }
    m.verify(&r.dir).unwrap();
    assert_eq!(file_hash(&r.dir.join("baseline.ckpt")).unwrap(), r.hash);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.dir.join("spectral_report.json")).unwrap()).unwrap();
    assert!(report["retrained"]["attack_success"].is_number());
    assert_eq!(report["config_hash"], r.hash.as_str());
}

#[test]
fn identical_configs_give_byte_equal_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("defense.list = prune, spectral, cluster\n");
    let (_, ma) = run(cfg.clone(), tmp.path().join("a"));
    let (_, mb) = run(cfg, tmp.path().join("b"));
    let mut a = files(&tmp.path().join("a"));
    let mut b = files(&tmp.path().join("b"));
    a.remove(MANIFEST_FILE);
    b.remove(MANIFEST_FILE);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{k} differs between runs");
    }
    let t = compare(&ma, &mb).unwrap();
    assert!(t.rows.iter().all(|r| r.delta() == Some(0.0)));
}

#[test]
fn report_rebuilds_from_documents_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let (r, _) = run(config("defense.list = prune, spectral\n"), tmp.path().join("a"));
    let before = files(&r.dir);
    for f in [
        "summary.csv",
        "prune_curve.csv",
        "spectral_histogram.csv",
        "baseline.ckpt",
    ] {
        std::fs::remove_file(r.dir.join(f)).unwrap();
    }
    let again = Run::open_dir(&r.dir).unwrap();
    again.execute(Stage::Report).unwrap();
    let after = files(&r.dir);
    for f in ["summary.csv", "prune_curve.csv", "spectral_histogram.csv"] {
        assert_eq!(before[f], after[f], "{f}");
    }
}

#[test]
fn missing_checkpoint_is_a_validation_error_and_marks_the_run_partial() {
    let tmp = tempfile::tempdir().unwrap();
    let r = Run::open(config("defense.list = prune\n"), Some(tmp.path().to_path_buf())).unwrap();
    let err = r.execute(Stage::DefendPrune).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("baseline.ckpt"), "{err}");
    let m = r.manifest().unwrap();
    assert!(m.partial);
    let s = m.stage("defend-prune").unwrap();
    assert_eq!(s.status, StageStatus::Failed);
    assert!(s.error.is_some());
}

#[test]
fn corrupt_checkpoint_halts_with_stage_name() {
    let tmp = tempfile::tempdir().unwrap();
    let r = Run::open(config("defense.list = spectral\n"), Some(tmp.path().to_path_buf())).unwrap();
    r.execute(Stage::TrainBaseline).unwrap();
    std::fs::write(tmp.path().join("baseline.ckpt"), b"BDL1garbage").unwrap();
    let err = r.execute(Stage::DefendSpectral).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(matches!(&err, ExperimentError::Stage { stage, .. } if stage == "defend-spectral"));
    let m = r.manifest().unwrap();
    assert!(m.partial);
    assert_eq!(m.stage("train-baseline").unwrap().status, StageStatus::Completed);
}

#[test]
fn directory_of_another_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let r = Run::open(config(""), Some(tmp.path().to_path_buf())).unwrap();
    r.execute(Stage::Data).unwrap();
    let err = Run::open(config("train.lr = 0.02\n"), Some(tmp.path().to_path_buf()))
        .err()
        .unwrap();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn attack_stage_must_match_configured_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let r = Run::open(config(""), Some(tmp.path().to_path_buf())).unwrap();
    assert_eq!(r.execute(Stage::EmbedAdversarial).unwrap_err().exit_code(), 1);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "cfg") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}
