//! Deflation FastICA with the logcosh contrast (`a = 1`).

use super::whiten::covariance_rank;
use super::{whiten_reduced, LinalgError, Matrix, WhiteningTransform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ICA_MAX_ITER: usize = 500;
/// A component has converged once `|⟨w_new, w_old⟩| > 1 - ICA_TOL`.
pub const ICA_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct IcaResult {
    /// Source estimates, `rows x components`.
    pub sources: Matrix,
    /// Unmixing vectors in whitened space, one per component.
    pub unmixing: Vec<Vec<f64>>,
    pub whitening: WhiteningTransform,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    /// Components actually extracted; lower than requested when the data
    /// has fewer non-degenerate directions.
    pub components: usize,
    pub requested: usize,
}

impl IcaResult {
    /// True if any component hit the iteration cap or the component count
    /// had to be reduced.
    pub fn has_warning(&self) -> bool {
        self.components < self.requested || self.converged.iter().any(|c| !c)
    }
}

pub fn fastica(m: &Matrix, n_components: usize, seed: u64) -> Result<IcaResult, LinalgError> {
    if n_components == 0 || n_components > m.cols() {
        return Err(LinalgError::InvalidArgument(format!(
            "{n_components} components requested from {} columns",
            m.cols()
        )));
    }
    let rank = covariance_rank(m);
    if rank == 0 {
        return Err(LinalgError::RankDeficient {
            rank: 0,
            needed: n_components,
        });
    }
    let dims = n_components.min(rank);
    let white = whiten_reduced(m, dims)?;
    let x = &white.data;
    let n = x.rows() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(dims);
    let mut iterations = Vec::with_capacity(dims);
    let mut converged = Vec::with_capacity(dims);
    let mut u = vec![0.0; x.rows()];

    for _ in 0..dims {
        let mut w: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
        decorrelate(&mut w, &found);
        normalize(&mut w);

        let mut done = false;
        let mut iters = 0;
        while iters < ICA_MAX_ITER {
            iters += 1;
            for (i, ui) in u.iter_mut().enumerate() {
                *ui = x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum();
            }
            let mut next = vec![0.0; dims];
            let mut mean_dg = 0.0;
            for (i, &ui) in u.iter().enumerate() {
                let g = ui.tanh();
                mean_dg += 1.0 - g * g;
                for (nj, xj) in next.iter_mut().zip(x.row(i)) {
                    *nj += xj * g;
                }
            }
            mean_dg /= n;
            for (nj, wj) in next.iter_mut().zip(&w) {
                *nj = *nj / n - mean_dg * wj;
            }
            decorrelate(&mut next, &found);
            if !normalize(&mut next) {
                break;
            }
            let overlap: f64 = next.iter().zip(&w).map(|(a, b)| a * b).sum();
            w = next;
            if overlap.abs() > 1.0 - ICA_TOL {
                done = true;
                break;
            }
        }
        iterations.push(iters);
        converged.push(done);
        found.push(w);
    }

    let mut sources = Vec::with_capacity(x.rows() * dims);
    for i in 0..x.rows() {
        let row = x.row(i);
        for w in &found {
            sources.push(row.iter().zip(w).map(|(a, b)| a * b).sum());
        }
    }
    Ok(IcaResult {
        sources: Matrix::new(x.rows(), dims, sources)?,
        unmixing: found,
        whitening: white.transform,
        iterations,
        converged,
        components: dims,
        requested: n_components,
    })
}

fn decorrelate(w: &mut [f64], found: &[Vec<f64>]) {
    for f in found {
        let d: f64 = w.iter().zip(f).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(f).for_each(|(a, b)| *a -= d * b);
    }
}

fn normalize(w: &mut [f64]) -> bool {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-300 {
        return false;
    }
    w.iter_mut().for_each(|v| *v /= norm);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn unmixes_two_uniform_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2000;
        let s1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix = [[0.8, 0.6], [0.3, -0.9]];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                vec![
                    mix[0][0] * s1[i] + mix[0][1] * s2[i],
                    mix[1][0] * s1[i] + mix[1][1] * s2[i],
                ]
            })
            .collect();
        let r = fastica(&Matrix::from_rows(&rows).unwrap(), 2, 5).unwrap();
        assert!(!r.has_warning());
        let c0: Vec<f64> = (0..n).map(|i| r.sources.get(i, 0)).collect();
        let c1: Vec<f64> = (0..n).map(|i| r.sources.get(i, 1)).collect();
        let direct = corr(&c0, &s1).abs().min(corr(&c1, &s2).abs());
        let swapped = corr(&c0, &s2).abs().min(corr(&c1, &s1).abs());
        assert!(direct.max(swapped) >= 0.95, "{direct} {swapped}");
    }

    #[test]
    fn gaussian_components_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..600)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>())
            .collect();
        let r = fastica(&Matrix::from_rows(&rows).unwrap(), 3, 9).unwrap();
        let means = r.sources.column_means();
        let cov = r.sources.covariance();
        for k in 0..3 {
            assert!(means[k].abs() <= 1e-6);
            assert!((cov[k * 3 + k] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn degenerate_columns_reduce_component_count() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64).sin(), 0.0, (i as f64 * 0.7).cos()])
            .collect();
        let r = fastica(&Matrix::from_rows(&rows).unwrap(), 3, 1).unwrap();
        assert_eq!(r.components, 2);
        assert!(r.has_warning());
    }

    #[test]
    fn too_many_components_rejected() {
        let m = Matrix::zeros(10, 2);
        assert!(fastica(&m, 3, 0).is_err());
    }
}
