//! Independent reference computations and the self-test that compares the
//! library against them: finite-difference gradient checks, a dense Jacobi
//! eigensolver for the power iteration, and pair-counting for the ARI.

use crate::linalg::{adjusted_rand_index, top_singular_vector, LinalgError, Matrix, Partition};
use crate::tensor::{grad_check, Activation, NormMode, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const COSINE_TOLERANCE: f64 = 1e-8;
pub const ARI_TOLERANCE: f64 = 1e-12;
const FD_EPS: f64 = 1e-6;

/// Eigen-decomposition of a symmetric `n×n` row-major matrix by cyclic
/// Jacobi rotations. Eigenvalues descending; `vectors[i]` pairs with
/// `values[i]`.
pub fn jacobi_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>), LinalgError> {
    if a.len() != n * n || n == 0 {
        return Err(LinalgError::DimensionMismatch(format!(
            "{} entries for n = {n}",
            a.len()
        )));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);
    let total: f64 = m.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&j| (0..n).map(|k| v[k * n + j]).collect()).collect();
    Ok((values, vectors))
}

/// ARI from explicit pair counting over all `n(n−1)/2` pairs. `None` when
/// the index is undefined (both partitions trivial in the same way).
pub fn pair_counting_ari(a: &[usize], b: &[usize]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "partitions must align");
    let (mut both, mut only_a, mut only_b, mut neither) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1,
                (true, false) => only_a += 1,
                (false, true) => only_b += 1,
                (false, false) => neither += 1,
            }
        }
    }
    let (n11, n10, n01, n00) = (both as f64, only_a as f64, only_b as f64, neither as f64);
    let den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    if den == 0.0 {
        return None;
    }
    Some(2.0 * (n00 * n11 - n01 * n10) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteEntry {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

/// Random inputs for one instance and the scalar function to check.
fn grad_case(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Case) {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| random_tensor(rng, s, -1.0, 1.0);
    let weights = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    // Squared distance to a random target turns any output into a scalar
    // with non-uniform upstream gradients.
    fn wsum(t: &mut Tape, x: Var, w: &[f64]) -> Result<Var, TensorError> {
        let c = t.constant(t.shape(x).to_vec(), w.to_vec())?;
        t.mse(x, c)
    }
    match name {
        "linear" => {
            let w = weights(rng, 3 * 4);
            (
                vec![r(rng, &[3, 5]), r(rng, &[5, 4]), r(rng, &[4])],
                Box::new(move |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    wsum(t, y, &w)
                }),
            )
        }
        "conv2d" => {
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let x = r(rng, &[2, 2, 5, 5]);
            let k = r(rng, &[3, 2, 3, 3]);
            let out = (5 + 2 * padding - 3) / stride + 1;
            let w = weights(rng, 2 * 3 * out * out);
            (
                vec![x, k, r(rng, &[3])],
                Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride, padding)?;
                    wsum(t, y, &w)
                }),
            )
        }
        "max_pool2" => {
            let w = weights(rng, 2 * 2 * 3 * 3);
            (
                vec![r(rng, &[2, 2, 6, 6])],
                Box::new(move |t, v| {
                    let y = t.max_pool2(v[0])?;
                    wsum(t, y, &w)
                }),
            )
        }
        "relu" | "leaky_relu" | "sigmoid" => {
            let kind = match name {
                "relu" => Activation::Relu,
                "leaky_relu" => Activation::LeakyRelu(0.2),
                _ => Activation::Sigmoid,
            };
            let w = weights(rng, 4 * 6);
            (
                vec![random_tensor(rng, &[4, 6], -3.0, 3.0)],
                Box::new(move |t, v| {
                    let y = t.activation(v[0], kind)?;
                    wsum(t, y, &w)
                }),
            )
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let train = name == "batchnorm_train";
            let mean: Vec<f64> = weights(rng, 4);
            let var: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
            let w = weights(rng, 6 * 4);
            (
                vec![r(rng, &[6, 4]), random_tensor(rng, &[4], 0.5, 1.5), r(rng, &[4])],
                Box::new(move |t, v| {
                    let mode = if train {
                        NormMode::Train
                    } else {
                        NormMode::Eval {
                            running_mean: &mean,
                            running_var: &var,
                        }
                    };
                    let (y, _) = t.batchnorm(v[0], v[1], v[2], mode)?;
                    wsum(t, y, &w)
                }),
            )
        }
        "reshape_flatten" => {
            let w = weights(rng, 2 * 12);
            (
                vec![r(rng, &[2, 3, 2, 2])],
                Box::new(move |t, v| {
                    let f = t.flatten(v[0])?;
                    let y = t.reshape(f, vec![2, 12])?;
                    wsum(t, y, &w)
                }),
            )
        }
        "scale_columns" => {
            let f = weights(rng, 5);
            let w = weights(rng, 3 * 5);
            (
                vec![r(rng, &[3, 5])],
                Box::new(move |t, v| {
                    let y = t.scale_columns(v[0], f.clone())?;
                    wsum(t, y, &w)
                }),
            )
        }
        "axpby" => {
            let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let w = weights(rng, 12);
            (
                vec![r(rng, &[3, 4]), r(rng, &[3, 4])],
                Box::new(move |t, v| {
                    let y = t.axpby(alpha, v[0], beta, v[1])?;
                    wsum(t, y, &w)
                }),
            )
        }
        "select_rows" => {
            let rows: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
            let w = weights(rng, 6 * 3);
            (
                vec![r(rng, &[4, 3])],
                Box::new(move |t, v| {
                    let y = t.select_rows(v[0], rows.clone())?;
                    wsum(t, y, &w)
                }),
            )
        }
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
            (
                vec![random_tensor(rng, &[5, 4], -3.0, 3.0)],
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            )
        }
        "mse" => (
            vec![r(rng, &[4, 3]), r(rng, &[4, 3])],
            Box::new(|t, v| t.mse(v[0], v[1])),
        ),
        "binary_cross_entropy" => {
            let targets: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
            (
                vec![random_tensor(rng, &[6, 1], 0.05, 0.95)],
                Box::new(move |t, v| t.binary_cross_entropy(v[0], &targets)),
            )
        }
        "bce_with_logits" => {
            let targets: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
            (
                vec![random_tensor(rng, &[6, 1], -4.0, 4.0)],
                Box::new(move |t, v| t.bce_with_logits(v[0], &targets)),
            )
        }
        "sum" => (vec![r(rng, &[3, 3])], Box::new(|t, v| t.sum(v[0]))),
        "network" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            (
                vec![
                    r(rng, &[4, 1, 6, 6]),
                    random_tensor(rng, &[2, 1, 3, 3], -0.8, 0.8),
                    r(rng, &[2]),
                    random_tensor(rng, &[18, 5], -0.4, 0.4),
                    r(rng, &[5]),
                    random_tensor(rng, &[5], 0.5, 1.5),
                    r(rng, &[5]),
                    r(rng, &[5, 3]),
                    r(rng, &[3]),
                ],
                Box::new(move |t, v| {
                    let c = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                    let c = t.activation(c, Activation::Relu)?;
                    let c = t.max_pool2(c)?;
                    let f = t.flatten(c)?;
                    let h = t.linear(f, v[3], v[4])?;
                    let h = t.activation(h, Activation::LeakyRelu(0.2))?;
                    let (h, _) = t.batchnorm(h, v[5], v[6], NormMode::Train)?;
                    let logits = t.linear(h, v[7], v[8])?;
                    t.softmax_cross_entropy(logits, &labels)
                }),
            )
        }
        other => unreachable!("unknown gradient case {other}"),
    }
}

pub const GRAD_CASES: &[&str] = &[
    "linear",
    "conv2d",
    "max_pool2",
    "relu",
    "leaky_relu",
    "sigmoid",
    "batchnorm_train",
    "batchnorm_eval",
    "reshape_flatten",
    "scale_columns",
    "axpby",
    "select_rows",
    "softmax_cross_entropy",
    "mse",
    "binary_cross_entropy",
    "bce_with_logits",
    "sum",
    "network",
];

/// Finite-difference checks of every differentiable primitive and one
/// composed network, `instances` random draws each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradSuiteEntry>, TensorError> {
    GRAD_CASES
        .iter()
        .enumerate()
        .map(|(ci, &name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
            let mut entry = GradSuiteEntry {
                name: name.to_string(),
                instances,
                max_rel_error: 0.0,
                checked: 0,
                excluded: 0,
            };
            for _ in 0..instances {
                let (inputs, f) = grad_case(name, &mut rng);
                let r = grad_check(f, &inputs, FD_EPS)?;
                entry.max_rel_error = entry.max_rel_error.max(r.max_rel_error);
                entry.checked += r.checked;
                entry.excluded += r.excluded;
            }
            Ok(entry)
        })
        .collect()
}

/// Smallest `|cos|` between [`top_singular_vector`] and the Jacobi top
/// eigenvector of `MᵀM` over `count` random matrices up to `max_dim` square.
pub fn power_iteration_oracle(count: usize, max_dim: usize, seed: u64) -> Result<f64, LinalgError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 1.0f64;
    for _ in 0..count {
        let rows = rng.random_range(2..=max_dim);
        let cols = rng.random_range(1..=max_dim);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Matrix::new(rows, cols, data)?;
        let v = top_singular_vector(&m)?;
        let (_, vecs) = jacobi_eigen(&m.gram(), cols)?;
        let cos: f64 = v.iter().zip(&vecs[0]).map(|(a, b)| a * b).sum();
        worst = worst.min(cos.abs());
    }
    Ok(worst)
}

/// Largest disagreement between [`adjusted_rand_index`] and pair counting
/// over `count` random partition pairs of at most `max_n` points, plus the
/// number of pairs where the index was defined.
pub fn ari_oracle(count: usize, max_n: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut defined = 0;
    for _ in 0..count {
        let n = rng.random_range(2..=max_n);
        let ka = rng.random_range(1..=n);
        let kb = rng.random_range(1..=n);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        let lib = adjusted_rand_index(&Partition(a.clone()), &Partition(b.clone())).ok();
        match (lib, pair_counting_ari(&a, &b)) {
            (Some(x), Some(y)) => {
                worst = worst.max((x - y).abs());
                defined += 1;
            }
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
    }
    (worst, defined)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub gradients: Vec<GradSuiteEntry>,
    pub power_min_cos: f64,
    pub ari_max_diff: f64,
    pub ari_pairs_defined: usize,
    /// ARI of `[0,0,1,1]` against `[0,1,0,1]`.
    pub ari_half_case: f64,
}

impl SelftestReport {
    pub fn gradients_pass(&self) -> bool {
        self.gradients.iter().all(|g| g.max_rel_error <= GRAD_TOLERANCE)
    }

    pub fn power_pass(&self) -> bool {
        self.power_min_cos >= 1.0 - COSINE_TOLERANCE
    }

    pub fn ari_pass(&self) -> bool {
        self.ari_max_diff <= ARI_TOLERANCE && (self.ari_half_case + 0.5).abs() <= ARI_TOLERANCE
    }

    pub fn passed(&self) -> bool {
        self.gradients_pass() && self.power_pass() && self.ari_pass()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SelftestError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Gradient checks (50 per case), 100 power-iteration matrices up to 64×64
/// and 500 ARI partition pairs up to 12 points.
pub fn run_selftest(seed: u64) -> Result<SelftestReport, SelftestError> {
    let gradients = gradient_suite(50, seed)?;
    let power_min_cos = power_iteration_oracle(100, 64, seed)?;
    let (ari_max_diff, ari_pairs_defined) = ari_oracle(500, 12, seed);
    let ari_half_case = adjusted_rand_index(&Partition(vec![0, 0, 1, 1]), &Partition(vec![0, 1, 0, 1]))?;
    Ok(SelftestReport {
        gradients,
        power_min_cos,
        ari_max_diff,
        ari_pairs_defined,
        ari_half_case,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        let (vals, vecs) = jacobi_eigen(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((vecs[0][0].abs() - s).abs() < 1e-12 && (vecs[0][1].abs() - s).abs() < 1e-12);
    }

    #[test]
    fn pair_counting_matches_hand_values() {
        assert_eq!(pair_counting_ari(&[0, 0, 1, 1], &[1, 1, 0, 0]), Some(1.0));
        assert!((pair_counting_ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(pair_counting_ari(&[0, 0, 0], &[0, 0, 0]), None);
    }

    #[test]
    fn small_suite_passes() {
        let g = gradient_suite(2, 9).unwrap();
        assert_eq!(g.len(), GRAD_CASES.len());
        assert!(
            g.iter().all(|e| e.max_rel_error <= GRAD_TOLERANCE && e.checked > 0),
            "{g:?}"
        );
        assert!(power_iteration_oracle(5, 12, 1).unwrap() >= 1.0 - COSINE_TOLERANCE);
        assert!(ari_oracle(50, 8, 2).0 <= ARI_TOLERANCE);
    }
}
