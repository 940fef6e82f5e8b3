use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "dataset.train_per_class = 20
dataset.test_per_class = 8
dataset.size = 12
dataset.seed = 2
poison.rate = 0.1
poison.seed = 2
model.conv_channels = 4
model.latent_dim = 10
model.seed = 2
train.epochs = 2
train.seed = 2
defense.list = prune, spectral, cluster
defense.cluster_restarts = 8
defense.prune_step = 0.5
";

fn bdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdlab"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.cfg");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"], &["defend-prune", "--help"]] {
        let o = bdlab(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", text(&o));
    }
    let o = bdlab(&["--help"]);
    for sub in [
        "train-baseline",
        "embed-targeted",
        "embed-adversarial",
        "defend-cluster",
        "selftest",
        "compare",
    ] {
        assert!(text(&o).contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let o = bdlab(&["defend-prune", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("Usage"), "{}", text(&o));
    assert_eq!(bdlab(&[]).status.code(), Some(1));
    assert_eq!(bdlab(&["train-baseline", "--seed", "x"]).status.code(), Some(1));
}

#[test]
fn validation_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    let o = bdlab(&["train-baseline"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let cfg = write_config(tmp.path(), &format!("{TINY}model.depth = 3\n"));
    assert_eq!(
        bdlab(&["train-baseline", "--config", &cfg, "--out", out]).status.code(),
        Some(1)
    );
    let o = bdlab(&["train-baseline", "--config", "/no/such/file.cfg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn defend_prune_without_checkpoint_exits_one_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let o = bdlab(&["defend-prune", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let t = text(&o);
    assert!(t.contains("missing checkpoint") && t.contains("train-baseline"), "{t}");
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(
        bdlab(&["train-baseline", "--config", &cfg, "--out", out]).status.code(),
        Some(0)
    );
    std::fs::write(tmp.path().join("run/baseline.ckpt"), b"not a checkpoint").unwrap();
    let o = bdlab(&["defend-spectral", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("defend-spectral"));
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bdlab(&["selftest", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("selftest passed") && t.contains("network"));
    assert!(tmp.path().join("selftest.json").exists());
}

#[test]
fn stage_by_stage_run_report_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let a = tmp.path().join("a");
    let a = a.to_str().unwrap();
    for stage in [
        "train-baseline",
        "defend-prune",
        "defend-spectral",
        "defend-cluster",
        "retrain",
        "report",
    ] {
        let o = bdlab(&[stage, "--config", &cfg, "--out", a]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", text(&o));
    }
    std::fs::remove_file(tmp.path().join("a/summary.csv")).unwrap();
    assert_eq!(bdlab(&["report", "--out", a]).status.code(), Some(0));
    assert!(tmp.path().join("a/summary.csv").exists());

    let b = tmp.path().join("b");
    let o = bdlab(&["run", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let o = bdlab(&["compare", a, b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert!(rows.iter().any(|r| r.starts_with("spectral,poisons_left_fraction,")));
    assert!(rows.iter().all(|r| r.ends_with(",0")), "{csv}");
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let a = tmp.path().join("a");
    let o = bdlab(&[
        "train-baseline",
        "--config",
        &cfg,
        "--seed",
        "7",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let stored = std::fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(stored.contains("model.seed = 7") && stored.contains("poison.seed = 7"));
    let o = bdlab(&["train-baseline", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(1),
        "reusing the directory with other seeds must fail"
    );
}
