//! Optimizer, poisoned-baseline training and the two embedding attacks.

mod adversarial;
mod baseline;
mod targeted;

pub use adversarial::{discriminator_accuracy, train_adversarial_embedding, AdversarialOutcome};
pub use baseline::{train_baseline, train_classifier_with, BatchLoss};
pub use targeted::{backdoor_statistic, identify_backdoor_neurons, train_targeted_embedding, BackdoorNeuronSet};

use crate::data::LabeledDataset;
use crate::nn::SplitClassifier;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite gradient in parameter {param} at step {step}")]
    NonFiniteGradient { param: usize, step: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty evaluation set: {0}")]
    EmptySet(&'static str),
}

/// Hyper-parameters shared by every trainer. Attack-specific fields are
/// ignored by trainers that do not use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is divided by `lr_divisor`.
    pub lr_steps: Vec<usize>,
    pub lr_divisor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight of the latent penalty term.
    pub lambda: f64,
    /// Activation scale for targeted embedding.
    pub k: f64,
    pub disc_lr: f64,
    pub disc_momentum: f64,
    pub disc_weight_decay: f64,
    /// Discriminator input noise at epoch 0.
    pub sigma0: f64,
    /// Per-epoch division of the noise level.
    pub sigma_decay: f64,
    /// Start adversarial embedding from the supplied (baseline) weights
    /// rather than a fresh initialization.
    pub fine_tune: bool,
    /// Oversample poisons to about half of each discriminator batch.
    pub disc_rebalance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            lr_steps: proportional_steps(20),
            lr_divisor: 10.0,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            lambda: 10.0,
            k: 1e-4,
            disc_lr: 0.01,
            disc_momentum: 0.9,
            disc_weight_decay: 0.0,
            sigma0: 0.1,
            sigma_decay: 10.0,
            fine_tune: true,
            disc_rebalance: true,
        }
    }
}

impl TrainConfig {
    // `!(x > 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size 0".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {}", self.lambda));
        }
        if !(self.lr_divisor > 0.0) || !(self.sigma_decay > 0.0) || !(self.disc_lr > 0.0) {
            return bad("divisors and discriminator rate must be positive".into());
        }
        if !(self.sigma0 >= 0.0) {
            return bad(format!("sigma0 {}", self.sigma0));
        }
        Ok(())
    }
}

/// Step epochs at 50% and 75% of the run.
pub fn proportional_steps(epochs: usize) -> Vec<usize> {
    vec![epochs / 2, epochs * 3 / 4]
}

/// Base rate divided by `lr_divisor` once for each step epoch reached.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.lr_steps.iter().filter(|&&s| epoch >= s).count();
    cfg.lr / cfg.lr_divisor.powi(passed as i32)
}

/// Momentum SGD state for one parameter list.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
    steps: usize,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    /// Applies `v ← m·v + g + wd·p`, `p ← p − lr·v` to every tensor using
    /// its accumulated gradient, then clears the gradients. Parameters
    /// without a gradient are treated as having a zero gradient.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn step(&mut self, params: Vec<&mut Tensor>, lr: f64) -> Result<(), TrainError> {
        if !(lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!("learning rate {lr}")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::NonFiniteGradient {
                    param: i,
                    step: self.steps,
                });
            }
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let g = p.grad().map(|g| g.to_vec());
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = g.as_ref().map_or(0.0, |g| g[j]);
                v[j] = self.momentum * v[j] + gj + self.weight_decay * data[j];
                data[j] -= lr * v[j];
            }
            p.zero_grad();
        }
        self.steps += 1;
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub disc_loss: Option<f64>,
    pub clean_acc: Option<f64>,
    pub attack_success: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainingTrace {
    /// CSV with columns `epoch,loss,disc_loss,clean_acc,attack_success`;
    /// absent values are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("epoch,loss,disc_loss,clean_acc,attack_success\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                r.loss,
                opt(r.disc_loss),
                opt(r.clean_acc),
                opt(r.attack_success)
            );
        }
        s
    }
}

/// Clean accuracy and attack success of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub attack_success: f64,
}

/// Test sets used for per-epoch monitoring.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub clean: &'a LabeledDataset,
    pub triggered: &'a LabeledDataset,
}

pub(crate) fn fraction_matching(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Accuracy on `clean` and the fraction of `triggered` classified as its
/// (target) label.
pub fn evaluate(
    model: &SplitClassifier,
    clean: &LabeledDataset,
    triggered: &LabeledDataset,
) -> Result<Evaluation, TrainError> {
    if clean.is_empty() {
        return Err(TrainError::EmptySet("clean"));
    }
    if triggered.is_empty() {
        return Err(TrainError::EmptySet("triggered"));
    }
    Ok(Evaluation {
        accuracy: fraction_matching(&model.predict(&clean.images)?, &clean.labels),
        attack_success: fraction_matching(&model.predict(&triggered.images)?, &triggered.labels),
    })
}

pub(crate) fn record_eval(
    model: &SplitClassifier,
    sets: Option<EvalSets<'_>>,
) -> Result<(Option<f64>, Option<f64>), TrainError> {
    match sets {
        Some(s) => {
            let e = evaluate(model, s.clean, s.triggered)?;
            Ok((Some(e.accuracy), Some(e.attack_success)))
        }
        None => Ok((None, None)),
    }
}
