//! Line-oriented `section.key = value` experiment files.

use super::ExperimentError;
use crate::data::SyntheticTaskConfig;
use crate::defenses::{ClusterConfig, RemovalRule};
use crate::nn::ArchSpec;
use crate::train::{proportional_steps, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    Synthetic {
        task: SyntheticTaskConfig,
        test_per_class: usize,
    },
    /// CIFAR-10 binary batches.
    Cifar { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub rate: f64,
    pub target: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_channels: Vec<usize>,
    pub latent_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMode {
    None,
    Targeted,
    Adversarial,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::None => "none",
            AttackMode::Targeted => "targeted",
            AttackMode::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// Fine-tuning hyper-parameters of the attack.
    pub train: TrainConfig,
    /// Clean-accuracy drop that delimits the backdoor neurons.
    pub accuracy_drop: f64,
    pub disc_hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefenseKind {
    Prune,
    Spectral,
    Cluster,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::Prune => "prune",
            DefenseKind::Spectral => "spectral",
            DefenseKind::Cluster => "cluster",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "prune" => Some(DefenseKind::Prune),
            "spectral" => Some(DefenseKind::Spectral),
            "cluster" => Some(DefenseKind::Cluster),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Sorted, no duplicates.
    pub list: Vec<DefenseKind>,
    /// Spectral budget; `None` takes the poison fraction of the target label.
    pub epsilon: Option<f64>,
    pub prune_step: f64,
    /// Re-rank after every step instead of following the initial ranking.
    pub prune_rerank: bool,
    pub cluster: ClusterConfig,
    pub retrain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub poison: PoisonConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub defenses: DefenseConfig,
    pub output_dir: PathBuf,
}

/// Parses `section.key = value` lines. `#` starts a comment; blank lines
/// are ignored; a key may appear once.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>, ExperimentError> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ExperimentError::Validation(format!(
                "line {}: expected `key = value`",
                no + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if !k.contains('.') || k.split('.').any(str::is_empty) {
            return Err(ExperimentError::Validation(format!(
                "line {}: key `{k}` is not `section.key`",
                no + 1
            )));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ExperimentError::Validation(format!(
                "line {}: duplicate key `{k}`",
                no + 1
            )));
        }
    }
    Ok(out)
}

struct Entries {
    map: BTreeMap<String, String>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ExperimentError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ExperimentError::Validation(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    fn or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ExperimentError> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ExperimentError> {
        self.parsed(key)?
            .ok_or_else(|| ExperimentError::Validation(format!("`{key}` must be set explicitly")))
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<usize>>, ExperimentError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) if v == "none" || v.is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<Vec<usize>, _>>()
                .map(Some)
                .map_err(|_| ExperimentError::Validation(format!("`{key}`: expected integers, got `{v}`"))),
        }
    }

    /// `auto` splits at 50% and 75% of `epochs`.
    fn steps(&mut self, key: &str, epochs: usize, default_auto: bool) -> Result<Vec<usize>, ExperimentError> {
        match self.map.get(key).map(String::as_str) {
            Some("auto") => {
                self.take(key);
                Ok(proportional_steps(epochs))
            }
            Some(_) => Ok(self.list(key)?.unwrap_or_default()),
            None if default_auto => Ok(proportional_steps(epochs)),
            None => Ok(Vec::new()),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), ExperimentError> {
    if cond {
        Ok(())
    } else {
        Err(ExperimentError::Validation(msg()))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut e = Entries {
            map: parse_entries(text)?,
        };

        let kind = e.take("dataset.kind").unwrap_or_else(|| "synthetic".into());
        let dataset = match kind.as_str() {
            "synthetic" => {
                let d = SyntheticTaskConfig::default();
                DatasetSource::Synthetic {
                    task: SyntheticTaskConfig {
                        num_classes: e.or("dataset.classes", d.num_classes)?,
                        size: e.or("dataset.size", d.size)?,
                        channels: e.or("dataset.channels", d.channels)?,
                        samples_per_class: e.or("dataset.train_per_class", d.samples_per_class)?,
                        noise_level: e.or("dataset.noise", d.noise_level)?,
                        seed: e.required("dataset.seed")?,
                    },
                    test_per_class: e.or("dataset.test_per_class", 100)?,
                }
            }
            "cifar" => {
                let train: PathBuf = e.required::<String>("dataset.path")?.into();
                let test: PathBuf = e.required::<String>("dataset.test_path")?.into();
                for p in [&train, &test] {
                    check(p.exists(), || format!("dataset file {} does not exist", p.display()))?;
                }
                DatasetSource::Cifar { train, test }
            }
            other => return Err(ExperimentError::Validation(format!("unknown dataset.kind `{other}`"))),
        };

        let poison = PoisonConfig {
            rate: e.or("poison.rate", 0.05)?,
            target: e.or("poison.target", 2)?,
            seed: e.required("poison.seed")?,
        };
        let model = ModelConfig {
            conv_channels: e.list("model.conv_channels")?.unwrap_or_else(|| vec![8, 16]),
            latent_dim: e.or("model.latent_dim", 64)?,
            seed: e.required("model.seed")?,
        };

        let base = TrainConfig::default();
        let epochs = e.or("train.epochs", base.epochs)?;
        let train = TrainConfig {
            epochs,
            batch_size: e.or("train.batch_size", base.batch_size)?,
            lr: e.or("train.lr", base.lr)?,
            lr_steps: e.steps("train.lr_steps", epochs, true)?,
            lr_divisor: e.or("train.lr_divisor", base.lr_divisor)?,
            momentum: e.or("train.momentum", base.momentum)?,
            weight_decay: e.or("train.weight_decay", 1e-2)?,
            seed: e.required("train.seed")?,
            ..base.clone()
        };

        let mode = match e.take("attack.mode").as_deref().unwrap_or("none") {
            "none" => AttackMode::None,
            "targeted" => AttackMode::Targeted,
            "adversarial" => AttackMode::Adversarial,
            other => return Err(ExperimentError::Validation(format!("unknown attack.mode `{other}`"))),
        };
        let attack = parse_attack(&mut e, mode, &train)?;

        let list = match e.take("defense.list") {
            None => Vec::new(),
            Some(v) if v == "none" || v.is_empty() => Vec::new(),
            Some(v) => {
                let mut l = v
                    .split(',')
                    .map(|p| {
                        DefenseKind::parse(p.trim())
                            .ok_or_else(|| ExperimentError::Validation(format!("unknown defense `{}`", p.trim())))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                l.sort();
                l.dedup();
                l
            }
        };
        let epsilon = match e.take("defense.epsilon").as_deref() {
            None | Some("auto") => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| ExperimentError::Validation(format!("`defense.epsilon`: cannot parse `{v}`")))?,
            ),
        };
        let cd = ClusterConfig::default();
        let rule = match e.take("defense.cluster_rule").as_deref() {
            None | Some("highest_poison") => RemovalRule::HighestPoisonFraction,
            Some(v) => match v.strip_prefix("relative_size:").map(str::parse::<f64>) {
                Some(Ok(max_fraction)) => RemovalRule::RelativeSize { max_fraction },
                _ => {
                    return Err(ExperimentError::Validation(format!(
                        "unknown defense.cluster_rule `{v}`"
                    )))
                }
            },
        };
        let defenses = DefenseConfig {
            list,
            epsilon,
            prune_step: e.or("defense.prune_step", 1.0 / 64.0)?,
            prune_rerank: e.or("defense.prune_rerank", false)?,
            cluster: ClusterConfig {
                components: e.or("defense.cluster_components", cd.components)?,
                clusters: 2,
                restarts: e.or("defense.cluster_restarts", cd.restarts)?,
                rule,
                seed: e.or("defense.cluster_seed", cd.seed)?,
            },
            retrain: e.or("defense.retrain", true)?,
        };
        let output_dir: PathBuf = e.take("output.dir").unwrap_or_else(|| "runs/default".into()).into();

        if let Some(k) = e.map.keys().next() {
            return Err(ExperimentError::Validation(format!("unknown key `{k}`")));
        }
        let cfg = ExperimentConfig {
            dataset,
            poison,
            model,
            train,
            attack,
            defenses,
            output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let p = &self.poison;
        check(p.rate > 0.0 && p.rate < 1.0, || {
            format!("poison.rate {} outside (0, 1)", p.rate)
        })?;
        check(p.target < self.num_classes(), || {
            format!("poison.target {} out of range", p.target)
        })?;
        check(self.model.latent_dim >= 2, || {
            "model.latent_dim must be at least 2".into()
        })?;
        check(!self.model.conv_channels.is_empty(), || {
            "model.conv_channels is empty".into()
        })?;
        self.train
            .validate()
            .map_err(|e| ExperimentError::Validation(format!("train: {e}")))?;
        if self.attack.mode != AttackMode::None {
            self.attack
                .train
                .validate()
                .map_err(|e| ExperimentError::Validation(format!("attack: {e}")))?;
        }
        if let Some(eps) = self.defenses.epsilon {
            check(eps > 0.0 && eps < 0.5, || {
                format!("defense.epsilon {eps} outside (0, 0.5)")
            })?;
        }
        let s = self.defenses.prune_step;
        check(
            s > 0.0 && s <= 1.0 && ((1.0 / s).round() * s - 1.0).abs() < 1e-9,
            || format!("defense.prune_step {s} does not divide 1"),
        )?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetSource::Synthetic { task, .. } => task.num_classes,
            DatasetSource::Cifar { .. } => 10,
        }
    }

    pub fn arch(&self) -> ArchSpec {
        let input = match &self.dataset {
            DatasetSource::Synthetic { task, .. } => [task.channels, task.size, task.size],
            DatasetSource::Cifar { .. } => [3, 32, 32],
        };
        ArchSpec {
            input,
            conv_channels: self.model.conv_channels.clone(),
            latent_dim: self.model.latent_dim,
            num_classes: self.num_classes(),
            seed: self.model.seed,
        }
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        if let DatasetSource::Synthetic { task, .. } = &mut self.dataset {
            task.seed = seed;
        }
        self.poison.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.attack.train.seed = seed;
    }

    /// Every resolved setting as `key = value` in key order. The output
    /// directory is left out: it does not affect any result.
    pub fn canonical_entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let join = |v: &[usize]| {
            if v.is_empty() {
                "none".to_string()
            } else {
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            }
        };
        match &self.dataset {
            DatasetSource::Synthetic { task, test_per_class } => {
                put("dataset.kind", "synthetic".into());
                put("dataset.classes", task.num_classes.to_string());
                put("dataset.size", task.size.to_string());
                put("dataset.channels", task.channels.to_string());
                put("dataset.train_per_class", task.samples_per_class.to_string());
                put("dataset.test_per_class", test_per_class.to_string());
                put("dataset.noise", format!("{:?}", task.noise_level));
                put("dataset.seed", task.seed.to_string());
            }
            DatasetSource::Cifar { train, test } => {
                put("dataset.kind", "cifar".into());
                put("dataset.path", train.display().to_string());
                put("dataset.test_path", test.display().to_string());
            }
        }
        put("poison.rate", format!("{:?}", self.poison.rate));
        put("poison.target", self.poison.target.to_string());
        put("poison.seed", self.poison.seed.to_string());
        put("model.conv_channels", join(&self.model.conv_channels));
        put("model.latent_dim", self.model.latent_dim.to_string());
        put("model.seed", self.model.seed.to_string());
        let t = &self.train;
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", format!("{:?}", t.lr));
        put("train.lr_steps", join(&t.lr_steps));
        put("train.lr_divisor", format!("{:?}", t.lr_divisor));
        put("train.momentum", format!("{:?}", t.momentum));
        put("train.weight_decay", format!("{:?}", t.weight_decay));
        put("train.seed", t.seed.to_string());
        let a = &self.attack;
        put("attack.mode", a.mode.name().into());
        if a.mode != AttackMode::None {
            let t = &a.train;
            put("attack.epochs", t.epochs.to_string());
            put("attack.batch_size", t.batch_size.to_string());
            put("attack.lr", format!("{:?}", t.lr));
            put("attack.lr_steps", join(&t.lr_steps));
            put("attack.momentum", format!("{:?}", t.momentum));
            put("attack.weight_decay", format!("{:?}", t.weight_decay));
            put("attack.lambda", format!("{:?}", t.lambda));
            put("attack.seed", t.seed.to_string());
        }
        if a.mode == AttackMode::Targeted {
            put("attack.k", format!("{:?}", a.train.k));
            put("attack.accuracy_drop", format!("{:?}", a.accuracy_drop));
        }
        if a.mode == AttackMode::Adversarial {
            let t = &a.train;
            put("attack.disc_lr", format!("{:?}", t.disc_lr));
            put("attack.disc_momentum", format!("{:?}", t.disc_momentum));
            put("attack.disc_weight_decay", format!("{:?}", t.disc_weight_decay));
            put("attack.disc_hidden", join(&a.disc_hidden));
            put("attack.sigma0", format!("{:?}", t.sigma0));
            put("attack.sigma_decay", format!("{:?}", t.sigma_decay));
            put("attack.rebalance", t.disc_rebalance.to_string());
            put("attack.fine_tune", t.fine_tune.to_string());
        }
        let d = &self.defenses;
        put(
            "defense.list",
            if d.list.is_empty() {
                "none".into()
            } else {
                d.list.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
            },
        );
        put(
            "defense.epsilon",
            d.epsilon.map(|e| format!("{e:?}")).unwrap_or_else(|| "auto".into()),
        );
        put("defense.prune_step", format!("{:?}", d.prune_step));
        put("defense.prune_rerank", d.prune_rerank.to_string());
        put("defense.cluster_components", d.cluster.components.to_string());
        put("defense.cluster_restarts", d.cluster.restarts.to_string());
        put(
            "defense.cluster_rule",
            match d.cluster.rule {
                RemovalRule::HighestPoisonFraction => "highest_poison".into(),
                RemovalRule::RelativeSize { max_fraction } => format!("relative_size:{max_fraction:?}"),
            },
        );
        put("defense.cluster_seed", d.cluster.seed.to_string());
        put("defense.retrain", d.retrain.to_string());
        m
    }

    /// Canonical text; parsing it back gives the same configuration apart
    /// from the output directory.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.canonical_entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }
}

fn parse_attack(e: &mut Entries, mode: AttackMode, train: &TrainConfig) -> Result<AttackConfig, ExperimentError> {
    let base = TrainConfig {
        lr_steps: Vec::new(),
        ..train.clone()
    };
    let cfg = match mode {
        AttackMode::None => {
            return Ok(AttackConfig {
                mode,
                train: base,
                accuracy_drop: 0.08,
                disc_hidden: Vec::new(),
            })
        }
        AttackMode::Targeted => {
            let epochs = e.or("attack.epochs", 40)?;
            TrainConfig {
                epochs,
                batch_size: e.or("attack.batch_size", train.batch_size)?,
                lr: e.or("attack.lr", 0.01)?,
                lr_steps: e.steps("attack.lr_steps", epochs, true)?,
                momentum: e.or("attack.momentum", train.momentum)?,
                weight_decay: e.or("attack.weight_decay", 0.0)?,
                lambda: e.or("attack.lambda", 5.0)?,
                k: e.required("attack.k")?,
                seed: e.required("attack.seed")?,
                ..base
            }
        }
        AttackMode::Adversarial => {
            let epochs = e.or("attack.epochs", 60)?;
            TrainConfig {
                epochs,
                batch_size: e.or("attack.batch_size", train.batch_size)?,
                lr: e.or("attack.lr", 1e-3)?,
                lr_steps: e.steps("attack.lr_steps", epochs, false)?,
                momentum: e.or("attack.momentum", train.momentum)?,
                weight_decay: e.or("attack.weight_decay", train.weight_decay)?,
                lambda: e.or("attack.lambda", 3.0)?,
                seed: e.required("attack.seed")?,
                disc_lr: e.or("attack.disc_lr", 1e-5)?,
                disc_momentum: e.or("attack.disc_momentum", 0.9)?,
                disc_weight_decay: e.or("attack.disc_weight_decay", 0.0)?,
                sigma0: e.or("attack.sigma0", 0.1)?,
                sigma_decay: e.or("attack.sigma_decay", 10.0)?,
                disc_rebalance: e.or("attack.rebalance", false)?,
                fine_tune: e.or("attack.fine_tune", true)?,
                ..base
            }
        }
    };
    let accuracy_drop = if mode == AttackMode::Targeted {
        e.or("attack.accuracy_drop", 0.08)?
    } else {
        0.08
    };
    let disc_hidden = if mode == AttackMode::Adversarial {
        e.list("attack.disc_hidden")?.unwrap_or_else(|| vec![256, 128])
    } else {
        Vec::new()
    };
    check(accuracy_drop > 0.0 && accuracy_drop < 1.0, || {
        format!("attack.accuracy_drop {accuracy_drop} outside (0, 1)")
    })?;
    if mode == AttackMode::Targeted {
        check(cfg.k > 0.0 && cfg.k < 1.0, || {
            format!("attack.k {} outside (0, 1)", cfg.k)
        })?;
    }
    Ok(AttackConfig {
        mode,
        train: cfg,
        accuracy_drop,
        disc_hidden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset.seed = 1\npoison.seed = 2\nmodel.seed = 3\ntrain.seed = 4\n";

    #[test]
    fn comments_and_whitespace_do_not_change_hash() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let b = ExperimentConfig::parse(
            "# header\n  dataset.seed=1   # trailing\n\npoison.seed =2\nmodel.seed= 3\n\ttrain.seed = 4\noutput.dir = elsewhere\n",
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::parse(&format!("{MINIMAL}train.lr = 0.051\n")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn canonical_text_round_trips() {
        let a = ExperimentConfig::parse(&format!(
            "{MINIMAL}attack.mode = adversarial\nattack.seed = 5\ndefense.list = spectral, prune\n"
        ))
        .unwrap();
        let b = ExperimentConfig::parse(&a.canonical_text()).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(b.defenses.list, vec![DefenseKind::Prune, DefenseKind::Spectral]);
    }

    #[test]
    fn validation_errors() {
        assert!(ExperimentConfig::parse("poison.seed = 2\nmodel.seed = 3\ntrain.seed = 4\n").is_err());
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}bogus.key = 1\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}train.lr = 1\ntrain.lr = 2\n")).is_err());
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}attack.mode = targeted\nattack.seed = 1\n")).is_err());
        assert!(ExperimentConfig::parse(&format!(
            "{MINIMAL}dataset.kind = cifar\ndataset.path = /nope\ndataset.test_path = /nope\n"
        ))
        .is_err());
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}defense.list = magic\n")).is_err());
        assert!(ExperimentConfig::parse("no equals sign\n").is_err());
    }

    #[test]
    fn seed_override_touches_every_seed() {
        let mut a = ExperimentConfig::parse(MINIMAL).unwrap();
        let h = a.hash();
        a.override_seed(9);
        assert_ne!(a.hash(), h);
        assert!(a.canonical_text().contains("model.seed = 9"));
        assert!(a.canonical_text().contains("poison.seed = 9"));
    }
}
