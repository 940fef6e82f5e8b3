use backdoor_lab::data::{generate_synthetic, make_triggered_testset, poison_dataset, SyntheticTaskConfig};
use backdoor_lab::defenses::{activation_diff_ranking, prune_sweep, spectral_filter};
use backdoor_lab::linalg::{kmeans, Matrix};
use backdoor_lab::nn::{ArchSpec, SplitClassifier};
use backdoor_lab::par;
use backdoor_lab::train::{train_baseline, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench(c: &mut Criterion) {
    let train = generate_synthetic(&SyntheticTaskConfig {
        samples_per_class: 60,
        ..Default::default()
    });
    let test = generate_synthetic(&SyntheticTaskConfig {
        samples_per_class: 25,
        seed: 1,
        ..Default::default()
    });
    let (poisoned, mask) = poison_dataset(&train, 0.05, 2, 0).unwrap();
    let triggered = make_triggered_testset(&test, 2).unwrap();
    let model = SplitClassifier::build(&ArchSpec::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        lr_steps: Vec::new(),
        ..Default::default()
    };
    let z = model.extract_latents(&poisoned.images).unwrap();
    let latents = Matrix::new(poisoned.len(), model.latent_dim(), z.into_data()).unwrap();
    let ranking = activation_diff_ranking(&model, &test, &triggered).unwrap();

    let mut g = c.benchmark_group("parallel_vs_sequential");
    g.sample_size(10);
    for (name, seq) in modes() {
        par::set_sequential(seq);
        g.bench_with_input(BenchmarkId::new("train_epoch", name), &seq, |b, _| {
            b.iter(|| black_box(train_baseline(model.clone(), &poisoned, &cfg, None).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("kmeans_100_restarts", name), &seq, |b, _| {
            b.iter(|| black_box(kmeans(&latents, 2, 0, 100).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("spectral_filter", name), &seq, |b, _| {
            b.iter(|| black_box(spectral_filter(&model, &poisoned, &mask, 0.1).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("prune_sweep", name), &seq, |b, _| {
            b.iter(|| black_box(prune_sweep(&model, &ranking, &test, &triggered, 1.0 / 64.0).unwrap()))
        });
    }
    par::set_sequential(false);
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
