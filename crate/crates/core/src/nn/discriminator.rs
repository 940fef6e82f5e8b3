use super::{Layer, Mode, SeqPass, Sequential};
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Negative slope of the discriminator's leaky ReLUs.
pub const DISC_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct DiscriminatorSpec {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl DiscriminatorSpec {
    pub fn new(latent_dim: usize, seed: u64) -> Self {
        Self {
            latent_dim,
            hidden: vec![256, 128],
            seed,
        }
    }
}

/// Binary network over latent vectors: each hidden fully-connected block
/// is followed by leaky ReLU then batchnorm, and a single sigmoid unit
/// gives the probability that the latent came from a poisoned input.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub net: Sequential,
}

/// Noise level after `epoch` decays of `factor` from `sigma0`.
pub fn annealed_sigma(sigma0: f64, factor: f64, epoch: usize) -> f64 {
    sigma0 / factor.powi(epoch as i32)
}

impl Discriminator {
    pub fn build(spec: &DiscriminatorSpec) -> Result<Self, TensorError> {
        if spec.latent_dim == 0 || spec.hidden.contains(&0) {
            return Err(TensorError::InvalidArgument {
                op: "build_discriminator",
                detail: format!("widths {} -> {:?}", spec.latent_dim, spec.hidden),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::new();
        let mut width = spec.latent_dim;
        for &h in &spec.hidden {
            layers.push(Layer::linear(width, h, &mut rng));
            layers.push(Layer::Act(Activation::LeakyRelu(DISC_SLOPE)));
            layers.push(Layer::batchnorm(h));
            width = h;
        }
        layers.push(Layer::linear(width, 1, &mut rng));
        layers.push(Layer::Act(Activation::Sigmoid));
        Ok(Self {
            spec: spec.clone(),
            net: Sequential::new(layers),
        })
    }

    /// Records `D(latents + g)`. In training mode `g ~ N(0, sigma²)` is
    /// drawn from `rng`; in evaluation mode no noise is added.
    pub fn discriminate<R: Rng>(
        &self,
        tape: &mut Tape,
        latents: Var,
        noise_sigma: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<SeqPass, TensorError> {
        let mut pass = self.discriminate_logits(tape, latents, noise_sigma, mode, rng)?;
        pass.out = tape.activation(pass.out, Activation::Sigmoid)?;
        Ok(pass)
    }

    /// Same as [`Discriminator::discriminate`] but stops before the final
    /// sigmoid.
    pub fn discriminate_logits<R: Rng>(
        &self,
        tape: &mut Tape,
        latents: Var,
        noise_sigma: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<SeqPass, TensorError> {
        let s = tape.shape(latents).to_vec();
        if s.len() != 2 || s[1] != self.spec.latent_dim {
            return Err(TensorError::ShapeMismatch {
                op: "discriminate",
                detail: format!("latents {s:?} for latent_dim {}", self.spec.latent_dim),
            });
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: "discriminate",
                detail: format!("noise sigma {noise_sigma}"),
            });
        }
        let mut x = latents;
        if mode == Mode::Train && noise_sigma > 0.0 {
            let normal = Normal::new(0.0, noise_sigma).expect("validated sigma");
            let noise: Vec<f64> = (0..s[0] * s[1]).map(|_| normal.sample(rng)).collect();
            let g = tape.constant(s, noise)?;
            x = tape.add(x, g)?;
        }
        self.net.forward_prefix(tape, x, mode, self.net.layers.len() - 1)
    }

    /// Evaluation-mode probabilities for a `[n, latent_dim]` tensor.
    pub fn predict(&self, latents: &Tensor) -> Result<Vec<f64>, TensorError> {
        let mut tape = Tape::new();
        let z = tape.constant(latents.shape().to_vec(), latents.data().to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.discriminate(&mut tape, z, 0.0, Mode::Eval, &mut rng)?.out;
        Ok(tape.value(out).to_vec())
    }
}
