//! Numerical primitives used by the latent-space defenses.

mod ari;
mod ica;
mod kmeans;
mod power;
mod whiten;

pub use ari::adjusted_rand_index;
pub use ica::{fastica, IcaResult, ICA_MAX_ITER, ICA_TOL};
pub use kmeans::{kmeans, wcss, KMeansResult, KMEANS_MAX_ITER};
pub use power::{power_iteration, top_singular_vector, PowerIteration};
pub use whiten::{whiten, whiten_reduced, Whitened, WhiteningTransform, EIGEN_FLOOR};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix has {rows} rows, need at least {needed}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("covariance rank {rank} is below the {needed} dimensions requested")]
    RankDeficient { rank: usize, needed: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("adjusted Rand index undefined (both partitions trivial)")]
    UndefinedIndex,
}

/// Row-major `rows x cols` matrix; rows are samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows * cols != data.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::InvalidArgument("non-finite entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// First `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        let n = n.min(self.cols);
        let mut data = Vec::with_capacity(self.rows * n);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[..n]);
        }
        Matrix {
            rows: self.rows,
            cols: n,
            data,
        }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in self.data.chunks(self.cols.max(1)) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Copy with column means subtracted.
    pub fn centered(&self) -> Matrix {
        let mean = self.column_means();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v - mean[i % self.cols])
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// `MᵀM` as a dense `cols x cols` row-major buffer.
    pub fn gram(&self) -> Vec<f64> {
        let c = self.cols;
        let mut g = vec![0.0; c * c];
        crate::tensor::gemm(
            c,
            self.rows,
            c,
            &self.data,
            crate::tensor::Layout::Transposed,
            &self.data,
            crate::tensor::Layout::Normal,
            0.0,
            &mut g,
        );
        g
    }

    /// Population covariance (divides by `rows`).
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.rows as f64;
        let mut g = self.centered().gram();
        g.iter_mut().for_each(|v| *v /= n);
        g
    }
}

/// Cluster index per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition(pub Vec<usize>);

impl Partition {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn num_clusters(&self) -> usize {
        self.0.iter().max().map_or(0, |m| m + 1)
    }

    /// Sample indices belonging to cluster `c`.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }
}

impl From<Vec<usize>> for Partition {
    fn from(v: Vec<usize>) -> Self {
        Partition(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_of_two_points() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(m.covariance(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.gram(), vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_non_finite_and_ragged() {
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
