use super::LabeledDataset;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const BAR: f64 = 0.9;
const BACKGROUND: f64 = 0.1;
const HALF_WIDTH: f64 = 0.8;

/// Oriented-bar classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub num_classes: usize,
    /// Square image side.
    pub size: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    /// Amplitude of the additive uniform noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            size: 16,
            channels: 1,
            samples_per_class: 250,
            noise_level: 0.15,
            seed: 0,
        }
    }
}

/// Class `c` is a bar through the image centre at angle `π c / classes`.
/// Its length keeps it clear of the bottom-right trigger patch.
fn template(c: usize, classes: usize, size: usize) -> Vec<f64> {
    let theta = std::f64::consts::PI * c as f64 / classes as f64;
    let (dx, dy) = (theta.cos(), theta.sin());
    let centre = (size as f64 - 1.0) / 2.0;
    let half_len = size as f64 * 5.0 / 16.0;
    let mut img = vec![BACKGROUND; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 - centre, y as f64 - centre);
            let t = (px * dx + py * dy).clamp(-half_len, half_len);
            let (qx, qy) = (px - t * dx, py - t * dy);
            if (qx * qx + qy * qy).sqrt() <= HALF_WIDTH {
                img[y * size + x] = BAR;
            }
        }
    }
    img
}

/// Class-balanced dataset, samples ordered class by class.
pub fn generate_synthetic(cfg: &SyntheticTaskConfig) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let px = cfg.size * cfg.size;
    let n = cfg.num_classes * cfg.samples_per_class;
    let mut data = Vec::with_capacity(n * px * cfg.channels);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.num_classes {
        let tpl = template(c, cfg.num_classes, cfg.size);
        for _ in 0..cfg.samples_per_class {
            let noisy: Vec<f64> = tpl
                .iter()
                .map(|&v| {
                    let e = if cfg.noise_level > 0.0 {
                        rng.random_range(-cfg.noise_level..=cfg.noise_level)
                    } else {
                        0.0
                    };
                    (v + e).clamp(0.0, 1.0)
                })
                .collect();
            for _ in 0..cfg.channels {
                data.extend_from_slice(&noisy);
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![n, cfg.channels, cfg.size, cfg.size], data).expect("consistent shape");
    LabeledDataset {
        images,
        labels,
        num_classes: cfg.num_classes,
    }
}
