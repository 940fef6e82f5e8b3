//! Network definitions: the split classifier `f = C ∘ H`, the latent
//! discriminator, checkpoints and neuron pruning.

mod checkpoint;
mod classifier;
mod discriminator;

pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{
    load_classifier, load_discriminator, read_checkpoint, save_classifier, save_discriminator, CheckpointError,
    CheckpointFile, TrainingMeta, CHECKPOINT_VERSION, MAGIC,
};
pub(crate) use classifier::argmax_rows;
pub use classifier::{ArchSpec, ClassifierPass, PruneMask, SplitClassifier, EVAL_CHUNK};
pub use discriminator::{annealed_sigma, Discriminator, DiscriminatorSpec, DISC_SLOPE};

use crate::tensor::{Activation, BatchStats, NormMode, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    /// `weights` is `[in, out]`.
    Linear {
        weights: Tensor,
        bias: Tensor,
    },
    Act(Activation),
    MaxPool2,
    Flatten,
    BatchNorm1d {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
}

impl Layer {
    pub fn linear<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Layer::Linear {
            weights: glorot(&[fan_in, fan_out], fan_in, fan_out, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn conv<R: Rng>(in_ch: usize, out_ch: usize, size: usize, padding: usize, rng: &mut R) -> Self {
        let area = size * size;
        Layer::Conv2d {
            kernels: glorot(&[out_ch, in_ch, size, size], in_ch * area, out_ch * area, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride: 1,
            padding,
        }
    }

    pub fn batchnorm(features: usize) -> Self {
        Layer::BatchNorm1d {
            gamma: Tensor::filled(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], 1.0),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv",
            Layer::Linear { .. } => "fc",
            Layer::Act(_) => "act",
            Layer::MaxPool2 => "pool",
            Layer::Flatten => "flatten",
            Layer::BatchNorm1d { .. } => "bn",
        }
    }
}

/// Uniform Glorot initialization, `a = sqrt(6 / (fan_in + fan_out))`.
fn glorot<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape has positive dims")
}

/// Output of [`Sequential::forward`]: the final value, the recorded
/// parameter leaves in [`Sequential::params`] order, and the batch
/// statistics seen by each training-mode batchnorm.
pub struct SeqPass {
    pub out: Var,
    pub params: Vec<Var>,
    pub bn_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<SeqPass, TensorError> {
        self.forward_prefix(tape, x, mode, self.layers.len())
    }

    /// Forward pass through the first `count` layers only.
    pub fn forward_prefix(
        &self,
        tape: &mut Tape,
        mut x: Var,
        mode: Mode,
        count: usize,
    ) -> Result<SeqPass, TensorError> {
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        for layer in &self.layers[..count.min(self.layers.len())] {
            x = match layer {
                Layer::Conv2d {
                    kernels,
                    bias,
                    stride,
                    padding,
                } => {
                    let k = tape.param(kernels);
                    let b = tape.param(bias);
                    params.extend([k, b]);
                    tape.conv2d(x, k, b, *stride, *padding)?
                }
                Layer::Linear { weights, bias } => {
                    let w = tape.param(weights);
                    let b = tape.param(bias);
                    params.extend([w, b]);
                    tape.linear(x, w, b)?
                }
                Layer::Act(kind) => tape.activation(x, *kind)?,
                Layer::MaxPool2 => tape.max_pool2(x)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::BatchNorm1d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let g = tape.param(gamma);
                    let b = tape.param(beta);
                    params.extend([g, b]);
                    let norm = match mode {
                        Mode::Train => NormMode::Train,
                        Mode::Eval => NormMode::Eval {
                            running_mean: running_mean.data(),
                            running_var: running_var.data(),
                        },
                    };
                    let (out, stats) = tape.batchnorm(x, g, b, norm)?;
                    bn_stats.extend(stats);
                    out
                }
            };
        }
        Ok(SeqPass {
            out: x,
            params,
            bn_stats,
        })
    }

    /// Trainable parameters in forward order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d { kernels, bias, .. } => out.extend([kernels, bias]),
                Layer::Linear { weights, bias } => out.extend([weights, bias]),
                Layer::BatchNorm1d { gamma, beta, .. } => out.extend([gamma, beta]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d { kernels, bias, .. } => out.extend([kernels, bias]),
                Layer::Linear { weights, bias } => out.extend([weights, bias]),
                Layer::BatchNorm1d { gamma, beta, .. } => out.extend([gamma, beta]),
                _ => {}
            }
        }
        out
    }

    /// Folds training-mode batch statistics into the running averages.
    /// Running variance uses the unbiased batch estimate.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let mut it = stats.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm1d {
                running_mean,
                running_var,
                ..
            } = layer
            {
                let Some(s) = it.next() else { return };
                let unbias = if s.count > 1 {
                    s.count as f64 / (s.count - 1) as f64
                } else {
                    1.0
                };
                for (r, m) in running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, v) in running_var.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
            }
        }
    }

    /// Every stored tensor (parameters and running statistics) with a
    /// stable name, for checkpointing.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = |field: &str| format!("{prefix}.{i}.{}.{field}", layer.kind());
            match layer {
                Layer::Conv2d { kernels, bias, .. } => {
                    out.push((name("weight"), kernels));
                    out.push((name("bias"), bias));
                }
                Layer::Linear { weights, bias } => {
                    out.push((name("weight"), weights));
                    out.push((name("bias"), bias));
                }
                Layer::BatchNorm1d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((name("gamma"), gamma));
                    out.push((name("beta"), beta));
                    out.push((name("running_mean"), running_mean));
                    out.push((name("running_var"), running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            let name = |field: &str| format!("{prefix}.{i}.{kind}.{field}");
            match layer {
                Layer::Conv2d { kernels, bias, .. } => {
                    out.push((name("weight"), kernels));
                    out.push((name("bias"), bias));
                }
                Layer::Linear { weights, bias } => {
                    out.push((name("weight"), weights));
                    out.push((name("bias"), bias));
                }
                Layer::BatchNorm1d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((name("gamma"), gamma));
                    out.push((name("beta"), beta));
                    out.push((name("running_mean"), running_mean));
                    out.push((name("running_var"), running_var));
                }
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = glorot(&[10, 20], 10, 20, &mut rng);
        let a = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= a));
        assert!(t.data().iter().any(|v| v.abs() > a * 0.9));
    }

    #[test]
    fn running_stats_momentum() {
        let mut s = Sequential::new(vec![Layer::batchnorm(1)]);
        s.update_running_stats(&[BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
            count: 4,
        }]);
        let Layer::BatchNorm1d {
            running_mean,
            running_var,
            ..
        } = &s.layers[0]
        else {
            unreachable!()
        };
        assert!((running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((running_var.data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn params_match_forward_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Sequential::new(vec![
            Layer::linear(3, 4, &mut rng),
            Layer::Act(Activation::Relu),
            Layer::batchnorm(4),
            Layer::linear(4, 2, &mut rng),
        ]);
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let pass = s.forward(&mut tape, x, Mode::Train).unwrap();
        let params = s.params();
        assert_eq!(pass.params.len(), params.len());
        for (v, p) in pass.params.iter().zip(params) {
            assert_eq!(tape.value(*v), p.data());
        }
        assert_eq!(pass.bn_stats.len(), 1);
        assert_eq!(s.named_tensors("x").len(), 8);
    }
}
