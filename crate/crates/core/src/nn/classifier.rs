use super::{Layer, Mode, Sequential};
use crate::par;
use crate::tensor::{Activation, BatchStats, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Samples per tape during batched inference. Fixed so that results do not
/// depend on how work is scheduled.
pub const EVAL_CHUNK: usize = 128;

/// Architecture of a [`SplitClassifier`]: `conv_channels.len()` blocks of
/// (3×3 conv, padding 1, relu, 2×2 max-pool), flatten, a relu
/// fully-connected layer of width `latent_dim`, and a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct ArchSpec {
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub conv_channels: Vec<usize>,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            input: [1, 16, 16],
            conv_channels: vec![8, 16],
            latent_dim: 64,
            num_classes: 8,
            seed: 0,
        }
    }
}

impl ArchSpec {
    /// Same layer shapes, ignoring the initialization seed.
    pub fn same_shape(&self, other: &ArchSpec) -> bool {
        self.input == other.input
            && self.conv_channels == other.conv_channels
            && self.latent_dim == other.latent_dim
            && self.num_classes == other.num_classes
    }
}

/// Latent neurons forced to zero; `true` means pruned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask(pub Vec<bool>);

impl PruneMask {
    pub fn none(latent_dim: usize) -> Self {
        Self(vec![false; latent_dim])
    }

    pub fn from_indices(latent_dim: usize, pruned: &[usize]) -> Self {
        let mut m = Self::none(latent_dim);
        for &i in pruned {
            m.0[i] = true;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pruned_count(&self) -> usize {
        self.0.iter().filter(|&&p| p).count()
    }

    fn factors(&self) -> Vec<f64> {
        self.0.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect()
    }
}

/// Handles recorded by [`SplitClassifier::forward`].
pub struct ClassifierPass {
    /// `z = H(x)` after any prune mask.
    pub latent: Var,
    pub logits: Var,
    pub feature_params: Vec<Var>,
    pub head_params: Vec<Var>,
    pub bn_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitClassifier {
    pub spec: ArchSpec,
    pub features: Sequential,
    pub head: Sequential,
    pub prune: Option<PruneMask>,
}

impl SplitClassifier {
    pub fn build(spec: &ArchSpec) -> Result<Self, TensorError> {
        let invalid = |detail: String| TensorError::InvalidArgument {
            op: "build_classifier",
            detail,
        };
        if spec.latent_dim < 2 {
            return Err(invalid(format!(
                "latent_dim must be at least 2, got {}",
                spec.latent_dim
            )));
        }
        if spec.num_classes < 2 || spec.conv_channels.is_empty() {
            return Err(invalid("need at least 2 classes and one conv block".into()));
        }
        let [mut ch, mut h, mut w] = spec.input;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::new();
        for &out in &spec.conv_channels {
            if h < 2 || w < 2 || out == 0 {
                return Err(invalid(format!("input {:?} too small for the conv stack", spec.input)));
            }
            layers.push(Layer::conv(ch, out, 3, 1, &mut rng));
            layers.push(Layer::Act(Activation::Relu));
            layers.push(Layer::MaxPool2);
            ch = out;
            h /= 2;
            w /= 2;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::linear(ch * h * w, spec.latent_dim, &mut rng));
        layers.push(Layer::Act(Activation::Relu));
        let head = Sequential::new(vec![Layer::linear(spec.latent_dim, spec.num_classes, &mut rng)]);
        Ok(Self {
            spec: spec.clone(),
            features: Sequential::new(layers),
            head,
            prune: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Copy of the model with `mask` applied on top of any existing mask.
    pub fn apply_prune(&self, mask: &PruneMask) -> SplitClassifier {
        let mut m = self.clone();
        let merged = match &self.prune {
            Some(old) => PruneMask(old.0.iter().zip(&mask.0).map(|(a, b)| *a || *b).collect()),
            None => mask.clone(),
        };
        m.prune = Some(merged);
        m
    }

    fn check_images(&self, images: &Tensor) -> Result<usize, TensorError> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(TensorError::ShapeMismatch {
                op: "classifier input",
                detail: format!("expected [n, {:?}], got {s:?}", self.spec.input),
            });
        }
        Ok(s[0])
    }

    fn mask_factors(&self) -> Option<Vec<f64>> {
        self.prune
            .as_ref()
            .filter(|m| m.pruned_count() > 0)
            .map(|m| m.factors())
    }

    /// Records `H` then `C` for an image batch already on the tape.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<ClassifierPass, TensorError> {
        let h = self.features.forward(tape, x, mode)?;
        let latent = match self.mask_factors() {
            Some(f) => tape.scale_columns(h.out, f)?,
            None => h.out,
        };
        let c = self.head.forward(tape, latent, mode)?;
        let mut bn_stats = h.bn_stats;
        bn_stats.extend(c.bn_stats);
        Ok(ClassifierPass {
            latent,
            logits: c.out,
            feature_params: h.params,
            head_params: c.params,
            bn_stats,
        })
    }

    /// Places an image batch on `tape` after validating its shape.
    pub fn input(&self, tape: &mut Tape, images: &Tensor) -> Result<Var, TensorError> {
        self.check_images(images)?;
        tape.constant(images.shape().to_vec(), images.data().to_vec())
    }

    fn chunked<F>(&self, images: &Tensor, width: usize, f: F) -> Result<Tensor, TensorError>
    where
        F: Fn(&mut Tape, Var) -> Result<Var, TensorError> + Sync + Send,
    {
        let n = self.check_images(images)?;
        let per = images.numel() / n;
        let chunks = n.div_ceil(EVAL_CHUNK);
        let parts = par::map_indexed(chunks, |c| {
            let lo = c * EVAL_CHUNK;
            let hi = (lo + EVAL_CHUNK).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = hi - lo;
            let mut tape = Tape::new();
            let x = tape.constant(shape, images.data()[lo * per..hi * per].to_vec())?;
            let out = f(&mut tape, x)?;
            Ok::<_, TensorError>(tape.value(out).to_vec())
        });
        let mut data = Vec::with_capacity(n * width);
        for p in parts {
            data.extend(p?);
        }
        Tensor::new(vec![n, width], data)
    }

    /// `z = H(x)` in evaluation mode, shape `[n, latent_dim]`.
    pub fn extract_latents(&self, images: &Tensor) -> Result<Tensor, TensorError> {
        self.chunked(images, self.latent_dim(), |tape, x| {
            Ok(self.forward(tape, x, Mode::Eval)?.latent)
        })
    }

    /// Class logits in evaluation mode, shape `[n, num_classes]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor, TensorError> {
        self.chunked(images, self.num_classes(), |tape, x| {
            Ok(self.forward(tape, x, Mode::Eval)?.logits)
        })
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>, TensorError> {
        Ok(argmax_rows(&self.logits(images)?, self.num_classes()))
    }

    /// Runs only the head `C` on precomputed latents with `mask` applied.
    pub fn head_logits(&self, latents: &Tensor, mask: Option<&PruneMask>) -> Result<Tensor, TensorError> {
        let s = latents.shape();
        if s.len() != 2 || s[1] != self.latent_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "head_logits",
                detail: format!("latents {s:?} for latent_dim {}", self.latent_dim()),
            });
        }
        let mut tape = Tape::new();
        let mut z = tape.constant(s.to_vec(), latents.data().to_vec())?;
        if let Some(m) = mask {
            z = tape.scale_columns(z, m.factors())?;
        }
        let out = self.head.forward(&mut tape, z, Mode::Eval)?.out;
        Ok(tape.to_tensor(out))
    }

    /// Parameters of `H` followed by those of `C`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.features.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.features.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let split = self
            .features
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::BatchNorm1d { .. }))
            .count()
            .min(stats.len());
        self.features.update_running_stats(&stats[..split]);
        self.head.update_running_stats(&stats[split..]);
    }
}

/// Index of the largest entry of each row; first index wins ties.
pub(crate) fn argmax_rows(t: &Tensor, width: usize) -> Vec<usize> {
    t.data()
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 1, 16, 16], (0..n * 256).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn widths_match_arch() {
        let m = SplitClassifier::build(&ArchSpec::default()).unwrap();
        let z = m.extract_latents(&random_images(3, 0)).unwrap();
        assert_eq!(z.shape(), &[3, 64]);
        let Layer::Linear { weights, .. } = &m.head.layers[0] else {
            panic!()
        };
        assert_eq!(weights.shape(), &[64, 8]);
    }

    #[test]
    fn seeding_is_deterministic() {
        let a = SplitClassifier::build(&ArchSpec::default()).unwrap();
        let b = SplitClassifier::build(&ArchSpec::default()).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.bit_eq(y)));
        let c = SplitClassifier::build(&ArchSpec {
            seed: 1,
            ..ArchSpec::default()
        })
        .unwrap();
        assert!(!a.params()[0].bit_eq(c.params()[0]));
    }

    #[test]
    fn latent_dim_below_two_rejected() {
        let spec = ArchSpec {
            latent_dim: 1,
            ..ArchSpec::default()
        };
        assert!(SplitClassifier::build(&spec).is_err());
    }

    #[test]
    fn composition_identity() {
        let m = SplitClassifier::build(&ArchSpec::default()).unwrap();
        let x = random_images(5, 1);
        let z = m.extract_latents(&x).unwrap();
        let via_head = m.head_logits(&z, None).unwrap();
        let direct = m.logits(&x).unwrap();
        assert!(via_head.bit_eq(&direct));
    }

    #[test]
    fn zero_features_give_zero_latent() {
        let mut m = SplitClassifier::build(&ArchSpec::default()).unwrap();
        for p in m.features.params_mut() {
            p.data_mut().fill(0.0);
        }
        let z = m.extract_latents(&Tensor::zeros(&[2, 1, 16, 16])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_equals_per_sample() {
        let m = SplitClassifier::build(&ArchSpec::default()).unwrap();
        let x = random_images(EVAL_CHUNK + 7, 2);
        let all = m.extract_latents(&x).unwrap();
        for i in [0, 5, EVAL_CHUNK + 3] {
            let one = Tensor::new(vec![1, 1, 16, 16], x.data()[i * 256..(i + 1) * 256].to_vec()).unwrap();
            let z = m.extract_latents(&one).unwrap();
            assert_eq!(z.data(), &all.data()[i * 64..(i + 1) * 64]);
        }
    }

    #[test]
    fn pruning_zeroes_columns() {
        let m = SplitClassifier::build(&ArchSpec::default()).unwrap();
        let x = random_images(100, 3);
        let base = m.extract_latents(&x).unwrap();
        let mask = PruneMask::from_indices(64, &[0, 7, 40]);
        let pruned = m.apply_prune(&mask);
        let z = pruned.extract_latents(&x).unwrap();
        for (i, (a, b)) in z.data().iter().zip(base.data()).enumerate() {
            if mask.0[i % 64] {
                assert_eq!(*a, 0.0);
            } else {
                assert_eq!(a, b);
            }
        }
        assert!(m.prune.is_none());
        assert_eq!(
            m.apply_prune(&PruneMask::none(64)).logits(&x).unwrap(),
            m.logits(&x).unwrap()
        );
    }

    #[test]
    fn full_prune_gives_head_bias_response() {
        let m = SplitClassifier::build(&ArchSpec::default()).unwrap();
        let x = random_images(4, 4);
        let all = m.apply_prune(&PruneMask(vec![true; 64]));
        let logits = all.logits(&x).unwrap();
        let zero = m.head_logits(&Tensor::zeros(&[1, 64]), None).unwrap();
        for row in logits.data().chunks(8) {
            assert_eq!(row, zero.data());
        }
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let m = SplitClassifier::build(&ArchSpec::default()).unwrap();
        assert!(m.extract_latents(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }
}
