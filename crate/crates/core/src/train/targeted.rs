use super::baseline::train_classifier_with;
use super::{fraction_matching, EvalSets, TrainConfig, TrainError, TrainingTrace};
use crate::data::LabeledDataset;
use crate::defenses::{latent_means, ranking_from_means};
use crate::nn::{argmax_rows, PruneMask, SplitClassifier};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Latent neurons that carry the backdoor, found by greedy pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorNeuronSet {
    pub indices: Vec<usize>,
    /// Accuracy drop that stopped the pruning.
    pub accuracy_drop: f64,
    pub base_accuracy: f64,
    pub final_accuracy: f64,
    /// Set when every neuron was pruned without reaching the drop.
    pub exhausted: bool,
}

/// Prunes along the activation-difference ranking until clean accuracy has
/// fallen by `accuracy_drop` (absolute) from the unpruned model. The
/// neurons pruned at that point are returned.
pub fn identify_backdoor_neurons(
    model: &SplitClassifier,
    clean: &LabeledDataset,
    triggered: &LabeledDataset,
    accuracy_drop: f64,
) -> Result<BackdoorNeuronSet, TrainError> {
    if !(accuracy_drop > 0.0 && accuracy_drop < 1.0) {
        return Err(TrainError::InvalidConfig(format!(
            "accuracy drop {accuracy_drop} outside (0, 1)"
        )));
    }
    if clean.is_empty() || triggered.is_empty() {
        return Err(TrainError::EmptySet("backdoor neuron identification"));
    }
    let zc = model.extract_latents(&clean.images)?;
    let zt = model.extract_latents(&triggered.images)?;
    let ranking = ranking_from_means(&latent_means(&zc), &latent_means(&zt));
    let dim = model.latent_dim();
    let acc = |mask: Option<&PruneMask>| -> Result<f64, TrainError> {
        let logits = model.head_logits(&zc, mask)?;
        Ok(fraction_matching(
            &argmax_rows(&logits, model.num_classes()),
            &clean.labels,
        ))
    };
    let base = acc(model.prune.as_ref())?;
    let existing = model.prune.clone().unwrap_or_else(|| PruneMask::none(dim));
    let mut mask = existing;
    let mut current = base;
    for (j, &n) in ranking.iter().enumerate() {
        mask.0[n] = true;
        current = acc(Some(&mask))?;
        if base - current >= accuracy_drop - 1e-12 {
            return Ok(BackdoorNeuronSet {
                indices: ranking[..=j].to_vec(),
                accuracy_drop,
                base_accuracy: base,
                final_accuracy: current,
                exhausted: false,
            });
        }
    }
    log::warn!("pruning every latent neuron never lowered accuracy by {accuracy_drop}");
    Ok(BackdoorNeuronSet {
        indices: ranking,
        accuracy_drop,
        base_accuracy: base,
        final_accuracy: current,
        exhausted: true,
    })
}

/// Mean over `neurons` of `|z̄_c^n − z̄_b^n|`.
pub fn backdoor_statistic(
    model: &SplitClassifier,
    clean: &LabeledDataset,
    triggered: &LabeledDataset,
    neurons: &[usize],
) -> Result<f64, TrainError> {
    if neurons.is_empty() {
        return Err(TrainError::InvalidConfig("no neurons given".into()));
    }
    let mc = latent_means(&model.extract_latents(&clean.images)?);
    let mt = latent_means(&model.extract_latents(&triggered.images)?);
    Ok(neurons.iter().map(|&n| (mc[n] - mt[n]).abs()).sum::<f64>() / neurons.len() as f64)
}

/// Latent targets: the frozen model's latents with `neurons` scaled by `k`.
pub(crate) fn scaled_targets(
    frozen: &SplitClassifier,
    images: &Tensor,
    neurons: &[usize],
    k: f64,
) -> Result<Tensor, TrainError> {
    let mut z = frozen.extract_latents(images)?;
    let d = frozen.latent_dim();
    let data = z.data_mut();
    for row in data.chunks_mut(d) {
        for &n in neurons {
            row[n] *= k;
        }
    }
    Ok(z)
}

/// Fine-tunes a copy of `baseline` on `CE + λ·MSE(z, z_target)`, where the
/// target shrinks the baseline's activations on `nb` by `cfg.k` and keeps
/// the other neurons at the baseline's values.
pub fn train_targeted_embedding(
    baseline: &SplitClassifier,
    nb: &BackdoorNeuronSet,
    train: &LabeledDataset,
    cfg: &TrainConfig,
    sets: Option<EvalSets<'_>>,
) -> Result<(SplitClassifier, TrainingTrace), TrainError> {
    if nb.indices.is_empty() {
        return Err(TrainError::InvalidConfig("empty backdoor neuron set".into()));
    }
    if nb.indices.iter().any(|&n| n >= baseline.latent_dim()) {
        return Err(TrainError::InvalidConfig("backdoor neuron out of range".into()));
    }
    if !(cfg.k > 0.0 && cfg.k < 1.0) {
        return Err(TrainError::InvalidConfig(format!("k = {} outside (0, 1)", cfg.k)));
    }
    let mut frozen = baseline.clone();
    frozen.prune = None;
    let mut model = frozen.clone();
    let lambda = cfg.lambda;
    let trace = train_classifier_with(&mut model, train, cfg, sets, &mut |tape, pass, batch| {
        if lambda == 0.0 {
            return Ok(None);
        }
        let target = scaled_targets(&frozen, &train.batch(batch), &nb.indices, cfg.k)?;
        let t = tape.constant(target.shape().to_vec(), target.into_data())?;
        let mse = tape.mse(pass.latent, t)?;
        Ok(Some(tape.axpby(lambda, mse, 0.0, mse)?))
    })?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_triggered_testset, SyntheticTaskConfig};
    use crate::nn::{ArchSpec, Mode};
    use crate::tensor::Tape;
    use crate::train::Sgd;

    fn setup() -> (SplitClassifier, LabeledDataset) {
        let d = generate_synthetic(&SyntheticTaskConfig {
            num_classes: 4,
            samples_per_class: 10,
            ..Default::default()
        });
        let spec = ArchSpec {
            conv_channels: vec![4, 4],
            latent_dim: 8,
            num_classes: 4,
            ..Default::default()
        };
        (SplitClassifier::build(&spec).unwrap(), d)
    }

    #[test]
    fn identification_rules() {
        let (m, d) = setup();
        let t = make_triggered_testset(&d, 2).unwrap();
        let nb = identify_backdoor_neurons(&m, &d, &t, 1e-9).unwrap();
        assert!(!nb.indices.is_empty());
        assert!(nb.indices.iter().all(|&i| i < 8));
        if !nb.exhausted {
            assert!(nb.final_accuracy < nb.base_accuracy);
        }
        assert!(identify_backdoor_neurons(&m, &d, &t, 0.0).is_err());
    }

    #[test]
    fn rejects_bad_arguments() {
        let (m, d) = setup();
        let nb = BackdoorNeuronSet {
            indices: vec![],
            accuracy_drop: 0.08,
            base_accuracy: 0.0,
            final_accuracy: 0.0,
            exhausted: false,
        };
        let cfg = TrainConfig::default();
        assert!(train_targeted_embedding(&m, &nb, &d, &cfg, None).is_err());
        let nb = BackdoorNeuronSet { indices: vec![0], ..nb };
        let bad_k = TrainConfig { k: 1.0, ..cfg };
        assert!(train_targeted_embedding(&m, &nb, &d, &bad_k, None).is_err());
    }

    #[test]
    fn zero_lambda_is_plain_fine_tuning() {
        let (m, d) = setup();
        let nb = BackdoorNeuronSet {
            indices: vec![0, 1],
            accuracy_drop: 0.08,
            base_accuracy: 0.0,
            final_accuracy: 0.0,
            exhausted: false,
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            lambda: 0.0,
            ..Default::default()
        };
        let (a, ta) = train_targeted_embedding(&m, &nb, &d, &cfg, None).unwrap();
        let (b, tb) = crate::train::train_baseline(m, &d, &cfg, None).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
    }

    #[test]
    fn representation_loss_alone_decreases_monotonically() {
        let (frozen, d) = setup();
        let idx: Vec<usize> = (0..d.len()).collect();
        let images = d.batch(&idx);
        let target = scaled_targets(&frozen, &images, &[0, 3], 0.1).unwrap();
        let mut model = frozen.clone();
        let mut opt = Sgd::new(0.0, 0.0);
        let mut losses = Vec::new();
        for _ in 0..10 {
            let mut tape = Tape::new();
            let x = model.input(&mut tape, &images).unwrap();
            let pass = model.forward(&mut tape, x, Mode::Train).unwrap();
            let t = tape.constant(target.shape().to_vec(), target.data().to_vec()).unwrap();
            let loss = tape.mse(pass.latent, t).unwrap();
            losses.push(tape.value(loss)[0]);
            let g = tape.backward(loss).unwrap();
            let vars: Vec<_> = pass.feature_params.iter().chain(&pass.head_params).copied().collect();
            let mut params = model.params_mut();
            for (v, p) in vars.iter().zip(params.iter_mut()) {
                g.accumulate_into(*v, p).unwrap();
            }
            opt.step(params, 0.05).unwrap();
        }
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-6), "{losses:?}");
        assert!(losses[9] < losses[0]);
    }
}
