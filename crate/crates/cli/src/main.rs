use backdoor_lab::experiment::{compare, ExperimentConfig, ExperimentError, Run, RunManifest, Stage, MANIFEST_FILE};
use backdoor_lab::selftest::run_selftest;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "bdlab",
    version,
    about = "Backdoor embedding attacks and latent-space defenses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment configuration (`section.key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Run directory; defaults to `output.dir` from the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifier on the poisoned training set.
    TrainBaseline(Common),
    /// Fine-tune the baseline to shrink its backdoor neurons.
    EmbedTargeted(Common),
    /// Fine-tune the baseline against a latent discriminator.
    EmbedAdversarial(Common),
    /// Sweep activation-ranked latent pruning.
    DefendPrune(Common),
    /// Filter the training set by spectral signatures.
    DefendSpectral(Common),
    /// Filter the training set by activation clustering.
    DefendCluster(Common),
    /// Retrain from scratch on each filtered training set.
    Retrain(Common),
    /// Rebuild summary files from a run directory.
    Report(Common),
    /// Gradient checks and numerical oracle comparisons.
    Selftest(Common),
    /// Every stage the configuration asks for, in order.
    Run(Common),
    /// Side-by-side defense metrics of two runs.
    Compare {
        /// Run directory or manifest of the unattacked run.
        baseline: PathBuf,
        /// Run directory or manifest of the attacked run.
        attacked: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn open_run(c: &Common) -> Result<Run, ExperimentError> {
    let Some(path) = &c.config else {
        return match (&c.out, c.seed) {
            (Some(dir), None) => Run::open_dir(dir),
            _ => Err(ExperimentError::Validation("--config is required".into())),
        };
    };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg.override_seed(s);
    }
    Run::open(cfg, c.out.clone())
}

fn stage(c: &Common, s: Stage) -> Result<(), ExperimentError> {
    let run = open_run(c)?;
    let rec = run.execute(s)?;
    println!("{} completed in {}", rec.name, run.dir.display());
    for (k, v) in &rec.metrics {
        println!("  {k} = {v}");
    }
    for f in &rec.files {
        println!("  wrote {f}");
    }
    Ok(())
}

fn load_manifest(p: &Path) -> Result<RunManifest, ExperimentError> {
    if p.is_dir() {
        RunManifest::load(&p.join(MANIFEST_FILE))
    } else {
        RunManifest::load(p)
    }
}

fn selftest(c: &Common) -> Result<(), ExperimentError> {
    let report = run_selftest(c.seed.unwrap_or(0))?;
    for g in &report.gradients {
        println!(
            "grad {:<24} {:>3}/{:<3} max rel err {:.3e} {}",
            g.name,
            g.checked,
            g.instances,
            g.max_rel_error,
            if g.max_rel_error <= backdoor_lab::selftest::GRAD_TOLERANCE {
                "ok"
            } else {
                "FAIL"
            }
        );
    }
    println!("power iteration min |cos|   {:.15}", report.power_min_cos);
    println!(
        "ari max |diff|              {:.3e} over {} defined pairs, half case {}",
        report.ari_max_diff, report.ari_pairs_defined, report.ari_half_case
    );
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(dir.join("selftest.json"), text + "\n")?;
    }
    if report.passed() {
        println!("selftest passed");
        Ok(())
    } else {
        Err(ExperimentError::Runtime("selftest failed".into()))
    }
}

fn dispatch(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::TrainBaseline(c) => stage(&c, Stage::TrainBaseline),
        Command::EmbedTargeted(c) => stage(&c, Stage::EmbedTargeted),
        Command::EmbedAdversarial(c) => stage(&c, Stage::EmbedAdversarial),
        Command::DefendPrune(c) => stage(&c, Stage::DefendPrune),
        Command::DefendSpectral(c) => stage(&c, Stage::DefendSpectral),
        Command::DefendCluster(c) => stage(&c, Stage::DefendCluster),
        Command::Retrain(c) => stage(&c, Stage::Retrain),
        Command::Report(c) => stage(&c, Stage::Report),
        Command::Selftest(c) => selftest(&c),
        Command::Run(c) => {
            let run = open_run(&c)?;
            let m = run.run_all()?;
            println!(
                "{} stages completed; manifest {}",
                m.stages.len(),
                run.dir.join(MANIFEST_FILE).display()
            );
            Ok(())
        }
        Command::Compare {
            baseline,
            attacked,
            common,
        } => {
            let table = compare(&load_manifest(&baseline)?, &load_manifest(&attacked)?)?;
            let csv = table.to_csv();
            match &common.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    let p = dir.join("comparison.csv");
                    std::fs::write(&p, csv)?;
                    println!("wrote {}", p.display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
