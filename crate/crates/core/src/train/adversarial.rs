use super::baseline::diverged;
use super::{lr_at_epoch, record_eval, EpochRecord, EvalSets, Sgd, TrainConfig, TrainError, TrainingTrace};
use crate::data::{LabeledDataset, PoisonMask};
use crate::nn::{annealed_sigma, ClassifierPass, Discriminator, Mode, SplitClassifier};
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOISE_STREAM: u64 = 0x6e_6f69_7365;
const OVERSAMPLE_STREAM: u64 = 0x6f76_6572;
/// Mean first-epoch discriminator loss below which D is reported as
/// degenerate.
const COLLAPSE_LOSS: f64 = 1e-3;

pub struct AdversarialOutcome {
    pub model: SplitClassifier,
    pub discriminator: Discriminator,
    pub trace: TrainingTrace,
}

/// Dataset indices for one alternating step: the minibatch followed by
/// poisoned indices drawn with replacement until poisoned rows are about
/// half of the combined batch.
fn rebalanced(batch: &[usize], mask: &PoisonMask, poisons: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n_poison = batch.iter().filter(|&&i| mask.flags[i]).count();
    let n_clean = batch.len() - n_poison;
    let mut out = batch.to_vec();
    for _ in 0..n_clean.saturating_sub(n_poison) {
        out.push(poisons[rng.random_range(0..poisons.len())]);
    }
    out
}

/// One discriminator update on detached latents. Returns the BCE loss.
pub(crate) fn disc_step(
    disc: &mut Discriminator,
    latents: &Tensor,
    targets: &[f64],
    sigma: f64,
    opt: &mut Sgd,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let z = tape.constant(latents.shape().to_vec(), latents.data().to_vec())?;
    let pass = disc.discriminate_logits(&mut tape, z, sigma, Mode::Train, rng)?;
    let loss = tape.bce_with_logits(pass.out, targets)?;
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss)?;
    let mut params = disc.net.params_mut();
    for (v, p) in pass.params.iter().zip(params.iter_mut()) {
        grads.accumulate_into(*v, p)?;
    }
    opt.step(params, lr)?;
    disc.net.update_running_stats(&pass.bn_stats);
    Ok(value)
}

/// One `(H, C)` update on `CE(first rows) − λ·BCE(D(z), B)`, with `D` read
/// but never modified. Returns the classification loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn model_step(
    model: &mut SplitClassifier,
    disc: &Discriminator,
    mut tape: Tape,
    pass: &ClassifierPass,
    labels: &[usize],
    targets: &[f64],
    lambda: f64,
    sigma: f64,
    opt: &mut Sgd,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let rows: Vec<usize> = (0..labels.len()).collect();
    let logits = tape.select_rows(pass.logits, rows)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let ce_value = tape.value(ce)[0];
    let loss = if lambda > 0.0 {
        let d = disc.discriminate_logits(&mut tape, pass.latent, sigma, Mode::Train, rng)?;
        let bce = tape.bce_with_logits(d.out, targets)?;
        tape.axpby(1.0, ce, -lambda, bce)?
    } else {
        ce
    };
    let grads = tape.backward(loss)?;
    let vars: Vec<Var> = pass.feature_params.iter().chain(&pass.head_params).copied().collect();
    let mut params = model.params_mut();
    for (v, p) in vars.iter().zip(params.iter_mut()) {
        grads.accumulate_into(*v, p)?;
    }
    opt.step(params, lr)?;
    model.update_running_stats(&pass.bn_stats);
    Ok(ce_value)
}

/// Alternating minibatch training of the discriminator on `B(x)` and of
/// the classifier against it, with annealed discriminator input noise.
pub fn train_adversarial_embedding(
    model: SplitClassifier,
    mut disc: Discriminator,
    train: &LabeledDataset,
    mask: &PoisonMask,
    cfg: &TrainConfig,
    sets: Option<EvalSets<'_>>,
) -> Result<AdversarialOutcome, TrainError> {
    cfg.validate()?;
    if mask.len() != train.len() {
        return Err(TrainError::InvalidConfig(format!(
            "mask of {} for {} samples",
            mask.len(),
            train.len()
        )));
    }
    let poisons = mask.indices();
    if poisons.is_empty() {
        return Err(TrainError::InvalidConfig(
            "adversarial embedding needs poisoned samples".into(),
        ));
    }
    if disc.spec.latent_dim != model.latent_dim() {
        return Err(TrainError::InvalidConfig(
            "discriminator width differs from latent_dim".into(),
        ));
    }
    let mut model = if cfg.fine_tune {
        model
    } else {
        SplitClassifier::build(&model.spec)?
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let mut over_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ OVERSAMPLE_STREAM);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut d_opt = Sgd::new(cfg.disc_momentum, cfg.disc_weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = TrainingTrace::default();

    for epoch in 0..cfg.epochs {
        let sigma = annealed_sigma(cfg.sigma0, cfg.sigma_decay, epoch);
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut ce_sum, mut d_sum, mut d_batches, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let combined = if cfg.disc_rebalance {
                rebalanced(batch, mask, &poisons, &mut over_rng)
            } else {
                batch.to_vec()
            };
            if combined.len() < 2 {
                continue;
            }
            let targets: Vec<f64> = combined.iter().map(|&i| mask.flags[i] as u8 as f64).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut step = || -> Result<(f64, f64), TrainError> {
                let mut tape = Tape::new();
                let x = model.input(&mut tape, &train.batch(&combined))?;
                let pass = model.forward(&mut tape, x, Mode::Train)?;
                let z = tape.to_tensor(pass.latent);
                let d_loss = disc_step(&mut disc, &z, &targets, sigma, &mut d_opt, cfg.disc_lr, &mut noise_rng)?;
                let ce = model_step(
                    &mut model,
                    &disc,
                    tape,
                    &pass,
                    &labels,
                    &targets,
                    cfg.lambda,
                    sigma,
                    &mut opt,
                    lr,
                    &mut noise_rng,
                )?;
                Ok((ce, d_loss))
            };
            let (ce, d_loss) = step().map_err(diverged(epoch))?;
            ce_sum += ce * batch.len() as f64;
            seen += batch.len();
            d_sum += d_loss;
            d_batches += 1;
        }
        let loss = ce_sum / seen.max(1) as f64;
        let disc_loss = d_sum / d_batches.max(1) as f64;
        if !loss.is_finite() || !disc_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, loss });
        }
        if epoch == 0 && disc_loss < COLLAPSE_LOSS {
            let msg = format!("discriminator loss {disc_loss:.2e} collapsed in the first epoch");
            log::warn!("{msg}");
            trace.warnings.push(msg);
        }
        let (clean_acc, attack_success) = record_eval(&model, sets)?;
        log::debug!(
            "adv epoch {epoch}: ce {loss:.4} d {disc_loss:.4} sigma {sigma:.1e} acc {clean_acc:?} asr {attack_success:?}"
        );
        trace.epochs.push(EpochRecord {
            epoch,
            loss,
            disc_loss: Some(disc_loss),
            clean_acc,
            attack_success,
        });
    }
    Ok(AdversarialOutcome {
        model,
        discriminator: disc,
        trace,
    })
}

/// Balanced accuracy of `disc` (threshold 0.5, evaluation mode) at telling
/// latents of `clean` inputs from latents of `triggered` inputs.
pub fn discriminator_accuracy(
    model: &SplitClassifier,
    disc: &Discriminator,
    clean: &LabeledDataset,
    triggered: &LabeledDataset,
) -> Result<f64, TrainError> {
    if clean.is_empty() || triggered.is_empty() {
        return Err(TrainError::EmptySet("discriminator evaluation"));
    }
    let pc = disc.predict(&model.extract_latents(&clean.images)?)?;
    let pt = disc.predict(&model.extract_latents(&triggered.images)?)?;
    let tn = pc.iter().filter(|&&p| p < 0.5).count() as f64 / pc.len() as f64;
    let tp = pt.iter().filter(|&&p| p >= 0.5).count() as f64 / pt.len() as f64;
    Ok(0.5 * (tn + tp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, poison_dataset, SyntheticTaskConfig};
    use crate::nn::{ArchSpec, DiscriminatorSpec};

    fn setup() -> (SplitClassifier, Discriminator, LabeledDataset, PoisonMask) {
        let d = generate_synthetic(&SyntheticTaskConfig {
            num_classes: 4,
            samples_per_class: 10,
            ..Default::default()
        });
        let (p, mask) = poison_dataset(&d, 0.2, 1, 0).unwrap();
        let spec = ArchSpec {
            conv_channels: vec![4, 4],
            latent_dim: 8,
            num_classes: 4,
            ..Default::default()
        };
        let m = SplitClassifier::build(&spec).unwrap();
        let disc = Discriminator::build(&DiscriminatorSpec {
            latent_dim: 8,
            hidden: vec![16, 8],
            seed: 0,
        })
        .unwrap();
        (m, disc, p, mask)
    }

    #[test]
    fn rebalancing_reaches_half() {
        let mask = PoisonMask {
            flags: (0..20).map(|i| i < 2).collect(),
            target_label: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch: Vec<usize> = (0..10).collect();
        let c = rebalanced(&batch, &mask, &[0, 1], &mut rng);
        let p = c.iter().filter(|&&i| mask.flags[i]).count();
        assert_eq!(c.len(), 16);
        assert_eq!(p, 8);
        assert_eq!(&c[..10], &batch[..]);
    }

    #[test]
    fn steps_touch_only_their_own_network() {
        let (mut m, mut disc, data, mask) = setup();
        let batch: Vec<usize> = (0..12).collect();
        let targets: Vec<f64> = batch.iter().map(|&i| mask.flags[i] as u8 as f64).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut opt, mut d_opt) = (Sgd::new(0.9, 0.0), Sgd::new(0.9, 0.0));

        let mut tape = Tape::new();
        let x = m.input(&mut tape, &data.batch(&batch)).unwrap();
        let pass = m.forward(&mut tape, x, Mode::Train).unwrap();
        let z = tape.to_tensor(pass.latent);

        let model_before = m.clone();
        let disc_before = disc.clone();
        disc_step(&mut disc, &z, &targets, 0.1, &mut d_opt, 0.1, &mut rng).unwrap();
        assert_eq!(m, model_before);
        assert_ne!(disc, disc_before);

        let disc_before = disc.clone();
        model_step(
            &mut m, &disc, tape, &pass, &labels, &targets, 5.0, 0.1, &mut opt, 0.1, &mut rng,
        )
        .unwrap();
        assert_eq!(disc, disc_before);
        assert_ne!(m, model_before);
    }

    #[test]
    fn deterministic_and_traced() {
        let (m, disc, data, mask) = setup();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            ..Default::default()
        };
        let a = train_adversarial_embedding(m.clone(), disc.clone(), &data, &mask, &cfg, None).unwrap();
        let b = train_adversarial_embedding(m, disc, &data, &mask, &cfg, None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace.epochs.len(), 2);
        assert!(a.trace.epochs.iter().all(|e| e.disc_loss.is_some()));
    }

    #[test]
    fn needs_poisons() {
        let (m, disc, data, _) = setup();
        let clean = PoisonMask::clean(data.len(), 1);
        let cfg = TrainConfig::default();
        assert!(train_adversarial_embedding(m, disc, &data, &clean, &cfg, None).is_err());
    }
}
