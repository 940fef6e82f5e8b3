use super::{lr_at_epoch, record_eval, EpochRecord, EvalSets, Sgd, TrainConfig, TrainError, TrainingTrace};
use crate::data::LabeledDataset;
use crate::nn::{ClassifierPass, Mode, SplitClassifier};
use crate::tensor::{Tape, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Extra loss term for one minibatch, given the recorded forward pass and
/// the dataset indices of the batch rows. `None` adds nothing.
pub type BatchLoss<'a> = dyn FnMut(&mut Tape, &ClassifierPass, &[usize]) -> Result<Option<Var>, TrainError> + 'a;

pub(crate) fn diverged(epoch: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Tensor(TensorError::NonFinite { .. }) => TrainError::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Minibatch SGD on `CE(f(x), y) + extra(x)` over `data` with a seeded
/// shuffle per epoch. The trace's loss column is the mean classification
/// loss of the epoch.
pub fn train_classifier_with(
    model: &mut SplitClassifier,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    sets: Option<EvalSets<'_>>,
    extra: &mut BatchLoss<'_>,
) -> Result<TrainingTrace, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainingTrace::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let ce = train_step(model, data, batch, &mut opt, lr, extra).map_err(diverged(epoch))?;
            total += ce * batch.len() as f64;
        }
        let loss = total / data.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch, loss });
        }
        let (clean_acc, attack_success) = record_eval(model, sets)?;
        log::debug!("epoch {epoch}: loss {loss:.4} acc {clean_acc:?} asr {attack_success:?}");
        trace.epochs.push(EpochRecord {
            epoch,
            loss,
            disc_loss: None,
            clean_acc,
            attack_success,
        });
    }
    Ok(trace)
}

fn train_step(
    model: &mut SplitClassifier,
    data: &LabeledDataset,
    batch: &[usize],
    opt: &mut Sgd,
    lr: f64,
    extra: &mut BatchLoss<'_>,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let x = model.input(&mut tape, &data.batch(batch))?;
    let pass = model.forward(&mut tape, x, Mode::Train)?;
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let ce = tape.softmax_cross_entropy(pass.logits, &labels)?;
    let ce_value = tape.value(ce)[0];
    let loss = match extra(&mut tape, &pass, batch)? {
        Some(term) => tape.add(ce, term)?,
        None => ce,
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

/// Trains on the (poisoned) set with the classification loss alone.
pub fn train_baseline(
    mut model: SplitClassifier,
    train: &LabeledDataset,
    cfg: &TrainConfig,
    sets: Option<EvalSets<'_>>,
) -> Result<(SplitClassifier, TrainingTrace), TrainError> {
    let trace = train_classifier_with(&mut model, train, cfg, sets, &mut |_, _, _| Ok(None))?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticTaskConfig};
    use crate::nn::ArchSpec;

    fn tiny() -> (SplitClassifier, LabeledDataset) {
        let data = generate_synthetic(&SyntheticTaskConfig {
            num_classes: 4,
            samples_per_class: 16,
            ..Default::default()
        });
        let spec = ArchSpec {
            conv_channels: vec![4, 4],
            latent_dim: 8,
            num_classes: 4,
            ..Default::default()
        };
        (SplitClassifier::build(&spec).unwrap(), data)
    }

    #[test]
    fn deterministic_traces() {
        let (m, d) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let (a, ta) = train_baseline(m.clone(), &d, &cfg, None).unwrap();
        let (b, tb) = train_baseline(m, &d, &cfg, None).unwrap();
        assert_eq!(ta, tb);
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.bit_eq(y)));
        assert_eq!(ta.epochs.len(), 2);
    }

    #[test]
    fn loss_decreases() {
        let (m, d) = tiny();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 8,
            lr: 0.02,
            lr_steps: vec![],
            ..Default::default()
        };
        let (_, t) = train_baseline(m, &d, &cfg, None).unwrap();
        assert!(t.epochs.last().unwrap().loss < t.epochs[0].loss);
    }

    #[test]
    fn huge_rate_diverges() {
        let (m, d) = tiny();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e300,
            lr_steps: vec![],
            ..Default::default()
        };
        let err = train_baseline(m, &d, &cfg, None).unwrap_err();
        assert!(
            matches!(err, TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. }),
            "{err}"
        );
    }
}
