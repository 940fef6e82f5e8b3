use super::{LinalgError, Matrix};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Covariance eigenvalues at or below this are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Affine map `y = (x - mean) · projection` recorded by [`whiten`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    /// `in_dims x out_dims`, row-major.
    pub projection: Vec<f64>,
    pub in_dims: usize,
    pub out_dims: usize,
    /// Covariance eigenvalues kept, descending.
    pub eigenvalues: Vec<f64>,
}

impl WhiteningTransform {
    pub fn apply(&self, m: &Matrix) -> Result<Matrix, LinalgError> {
        if m.cols() != self.in_dims {
            return Err(LinalgError::DimensionMismatch(format!(
                "transform expects {} columns, got {}",
                self.in_dims,
                m.cols()
            )));
        }
        let mut out = Vec::with_capacity(m.rows() * self.out_dims);
        let mut centered = vec![0.0; self.in_dims];
        for i in 0..m.rows() {
            for (c, (v, mu)) in centered.iter_mut().zip(m.row(i).iter().zip(&self.mean)) {
                *c = v - mu;
            }
            for k in 0..self.out_dims {
                out.push(
                    (0..self.in_dims)
                        .map(|j| centered[j] * self.projection[j * self.out_dims + k])
                        .sum(),
                );
            }
        }
        Matrix::new(m.rows(), self.out_dims, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Whitened {
    pub data: Matrix,
    pub transform: WhiteningTransform,
}

/// Full PCA whitening: zero column means and identity covariance.
///
/// Fails with [`LinalgError::RankDeficient`] if any covariance eigenvalue
/// falls below [`EIGEN_FLOOR`].
pub fn whiten(m: &Matrix) -> Result<Whitened, LinalgError> {
    whiten_reduced(m, m.cols())
}

/// PCA whitening onto the `dims` leading covariance directions.
pub fn whiten_reduced(m: &Matrix, dims: usize) -> Result<Whitened, LinalgError> {
    if m.rows() < 2 {
        return Err(LinalgError::TooFewRows {
            rows: m.rows(),
            needed: 2,
        });
    }
    if dims == 0 || dims > m.cols() {
        return Err(LinalgError::InvalidArgument(format!(
            "cannot whiten {} columns onto {dims} dimensions",
            m.cols()
        )));
    }
    let (values, vectors) = sorted_eigen(m);
    let rank = values.iter().filter(|&&v| v > EIGEN_FLOOR).count();
    if rank < dims {
        return Err(LinalgError::RankDeficient { rank, needed: dims });
    }
    let n = m.cols();
    let mut projection = vec![0.0; n * dims];
    for k in 0..dims {
        let scale = 1.0 / values[k].sqrt();
        for j in 0..n {
            projection[j * dims + k] = vectors[k][j] * scale;
        }
    }
    let transform = WhiteningTransform {
        mean: m.column_means(),
        projection,
        in_dims: n,
        out_dims: dims,
        eigenvalues: values[..dims].to_vec(),
    };
    let data = transform.apply(m)?;
    Ok(Whitened { data, transform })
}

/// Number of covariance eigenvalues above [`EIGEN_FLOOR`].
pub(crate) fn covariance_rank(m: &Matrix) -> usize {
    if m.rows() < 2 {
        return 0;
    }
    sorted_eigen(m).0.iter().filter(|&&v| v > EIGEN_FLOOR).count()
}

/// Covariance eigenpairs sorted by descending eigenvalue. Each eigenvector
/// is sign-normalized so its largest-magnitude entry is positive.
fn sorted_eigen(m: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.cols();
    let cov = DMatrix::from_row_slice(n, n, &m.covariance());
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let big = v
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(0.0);
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_identity_cov(m: &Matrix, tol: f64) {
        let c = m.covariance();
        let n = m.cols();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c[i * n + j] - want).abs() <= tol, "cov[{i},{j}] = {}", c[i * n + j]);
            }
        }
        for mu in m.column_means() {
            assert!(mu.abs() <= 1e-10);
        }
    }

    #[test]
    fn diagonal_covariance_becomes_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![2.0 * rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let w = whiten(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert_identity_cov(&w.data, 1e-8);
    }

    #[test]
    fn correlated_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mix: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let s: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                (0..6).map(|j| (0..6).map(|k| s[k] * mix[k * 6 + j]).sum()).collect()
            })
            .collect();
        let w = whiten(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert_identity_cov(&w.data, 1e-8);
    }

    #[test]
    fn rank_deficient_rejected() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        assert_eq!(
            whiten(&m).unwrap_err(),
            LinalgError::RankDeficient { rank: 1, needed: 2 }
        );
        let w = whiten_reduced(&m, 1).unwrap();
        assert_identity_cov(&w.data, 1e-8);
        assert_eq!(covariance_rank(&m), 1);
    }
}
