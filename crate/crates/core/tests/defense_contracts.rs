use backdoor_lab::data::{generate_synthetic, make_triggered_testset, poison_dataset, PoisonMask, SyntheticTaskConfig};
use backdoor_lab::defenses::{
    activation_cluster_filter, activation_diff_ranking, prune_sweep, spectral_filter, ClusterConfig, RemovalRule,
};
use backdoor_lab::nn::{ArchSpec, SplitClassifier};
use backdoor_lab::train::{evaluate, train_baseline, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn setup() -> (
    SplitClassifier,
    backdoor_lab::data::LabeledDataset,
    PoisonMask,
    PoisonMask,
) {
    let data = generate_synthetic(&SyntheticTaskConfig {
        num_classes: 4,
        samples_per_class: 40,
        size: 8,
        seed: 3,
        ..Default::default()
    });
    let (poisoned, mask) = poison_dataset(&data, 0.1, 1, 3).unwrap();
    let arch = ArchSpec {
        input: [1, 8, 8],
        conv_channels: vec![4],
        latent_dim: 12,
        num_classes: 4,
        seed: 3,
    };
    let cfg = TrainConfig {
        epochs: 3,
        lr_steps: Vec::new(),
        seed: 3,
        ..Default::default()
    };
    let (model, _) = train_baseline(SplitClassifier::build(&arch).unwrap(), &poisoned, &cfg, None).unwrap();
    let mut flags = mask.flags.clone();
    flags.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(99));
    assert_ne!(flags, mask.flags);
    let shuffled = PoisonMask {
        flags,
        target_label: mask.target_label,
    };
    (model, poisoned, mask, shuffled)
}

#[test]
fn shuffled_mask_changes_spectral_report_not_filtered_set() {
    let (model, train, mask, shuffled) = setup();
    let a = spectral_filter(&model, &train, &mask, 0.15).unwrap();
    let b = spectral_filter(&model, &train, &shuffled, 0.15).unwrap();
    assert_eq!(a.kept, b.kept);
    assert_eq!(a.filtered, b.filtered);
    assert_eq!(a.report.removed, b.report.removed);
    assert_ne!(a.report.poisons_remaining, b.report.poisons_remaining);
    assert_ne!(a.filtered_mask, b.filtered_mask);
}

#[test]
fn shuffled_mask_changes_cluster_report_not_filtered_set() {
    let (model, train, mask, shuffled) = setup();
    let cfg = ClusterConfig {
        components: 4,
        restarts: 20,
        rule: RemovalRule::RelativeSize { max_fraction: 0.35 },
        ..Default::default()
    };
    let a = activation_cluster_filter(&model, &train, &mask, &cfg).unwrap();
    let b = activation_cluster_filter(&model, &train, &shuffled, &cfg).unwrap();
    assert_eq!(a.filter.kept, b.filter.kept);
    assert_eq!(a.filter.filtered, b.filter.filtered);
    let fa: Vec<_> = a.classes.iter().map(|c| c.poison_fractions.clone()).collect();
    let fb: Vec<_> = b.classes.iter().map(|c| c.poison_fractions.clone()).collect();
    assert_ne!(fa, fb);
}

#[test]
fn prune_sweep_leaves_model_untouched_and_starts_at_evaluate() {
    let (model, _, _, _) = setup();
    let test = generate_synthetic(&SyntheticTaskConfig {
        num_classes: 4,
        samples_per_class: 10,
        size: 8,
        seed: 4,
        ..Default::default()
    });
    let triggered = make_triggered_testset(&test, 1).unwrap();
    let before = model.clone();
    let ranking = activation_diff_ranking(&model, &test, &triggered).unwrap();
    let curve = prune_sweep(&model, &ranking, &test, &triggered, 0.25).unwrap();
    assert_eq!(model, before);
    let e = evaluate(&model, &test, &triggered).unwrap();
    assert_eq!(curve.points[0].accuracy, e.accuracy);
    assert_eq!(curve.points[0].attack_success, e.attack_success);
    let ratios: Vec<f64> = curve.points.iter().map(|p| p.ratio).collect();
    assert_eq!(ratios, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
}
