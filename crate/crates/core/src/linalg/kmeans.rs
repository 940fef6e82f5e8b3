//! k-means with k-means++ seeding and best-of-restarts selection.

use super::{LinalgError, Matrix, Partition};
use crate::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub partition: Partition,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares of the returned partition.
    pub wcss: f64,
    pub iterations: usize,
    /// Objective after every assignment step of the winning restart.
    pub history: Vec<f64>,
}

pub fn kmeans(points: &Matrix, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult, LinalgError> {
    if k == 0 || k > points.rows() {
        return Err(LinalgError::InvalidArgument(format!(
            "k = {k} with {} points",
            points.rows()
        )));
    }
    let restarts = restarts.max(1);
    let runs = par::map_indexed(restarts, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        lloyd(points, k, &mut rng)
    });
    // First run wins ties, so the result does not depend on scheduling.
    let best = runs
        .into_iter()
        .reduce(|best, run| if run.wcss < best.wcss { run } else { best })
        .expect("at least one restart");
    Ok(best)
}

/// Within-cluster sum of squared distances to each cluster's mean.
pub fn wcss(points: &Matrix, partition: &Partition) -> f64 {
    let k = partition.num_clusters();
    let centroids = centroids_of(points, partition.labels(), k);
    (0..points.rows())
        .map(|i| sq_dist(points.row(i), &centroids[partition.labels()[i]]))
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids_of(points: &Matrix, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        sums[l].iter_mut().zip(points.row(i)).for_each(|(s, v)| *s += v);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

fn plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            (0..n).find(|&i| !chosen[i]).expect("k <= rows")
        };
        chosen[pick] = true;
        let c = points.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn assign(points: &Matrix, centers: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (i, l) in labels.iter_mut().enumerate() {
        let row = points.row(i);
        let (best, dist) = centers
            .iter()
            .enumerate()
            .map(|(c, ctr)| (c, sq_dist(row, ctr)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        *l = best;
        total += dist;
    }
    total
}

fn lloyd(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let n = points.rows();
    let mut centers = plus_plus(points, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let prev = labels.clone();
        let mut obj = assign(points, &centers, &mut labels);
        repair_empty(points, &mut centers, &mut labels);
        if labels != prev {
            obj = (0..n).map(|i| sq_dist(points.row(i), &centers[labels[i]])).sum();
        }
        if let Some(&last) = history.last() {
            let last: f64 = last;
            debug_assert!(
                obj <= last + 1e-9 * last.abs().max(1.0),
                "k-means objective increased: {last} -> {obj}"
            );
        }
        history.push(obj);
        iterations += 1;
        if labels == prev || iterations >= KMEANS_MAX_ITER {
            break;
        }
        centers = centroids_of(points, &labels, k);
    }
    let partition = Partition(labels);
    let wcss = wcss(points, &partition);
    KMeansResult {
        partition,
        centroids: centers,
        wcss,
        iterations,
        history,
    }
}

/// Gives every empty cluster the point currently farthest from its center.
fn repair_empty(points: &Matrix, centers: &mut [Vec<f64>], labels: &mut [usize]) {
    let k = centers.len();
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..labels.len()).filter(|&i| counts[labels[i]] > 1).max_by(|&a, &b| {
            let da = sq_dist(points.row(a), &centers[labels[a]]);
            let db = sq_dist(points.row(b), &centers[labels[b]]);
            da.total_cmp(&db).then(b.cmp(&a))
        });
        let Some(far) = far else { return };
        centers[empty] = points.row(far).to_vec();
        labels[far] = empty;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Uniform};

    #[test]
    fn separated_clouds_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Uniform::new(-0.35, 0.35).unwrap();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..100 {
            let cx = if i % 2 == 0 { 10.0 } else { -10.0 };
            rows.push(vec![cx + u.sample(&mut rng), u.sample(&mut rng)]);
            truth.push(i % 2);
        }
        let r = kmeans(&Matrix::from_rows(&rows).unwrap(), 2, 1, 10).unwrap();
        let same = r.partition.labels().iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(same == 100 || same == 0);
    }

    #[test]
    fn k_equals_rows() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&Matrix::from_rows(&rows).unwrap(), 6, 3, 2).unwrap();
        assert_eq!(r.wcss, 0.0);
        let mut l = r.partition.labels().to_vec();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn beats_random_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let r = kmeans(&m, 3, 2, 10).unwrap();
        for _ in 0..100 {
            let labels: Vec<usize> = (0..200)
                .map(|i| if i < 3 { i } else { rng.random_range(0..3) })
                .collect();
            assert!(r.wcss <= wcss(&m, &Partition(labels)));
        }
        assert!(r.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn k_above_rows_rejected() {
        assert!(kmeans(&Matrix::zeros(2, 2), 3, 0, 1).is_err());
    }

    #[test]
    fn identical_points_still_fill_clusters() {
        let m = Matrix::from_rows(&vec![vec![1.0, 1.0]; 5]).unwrap();
        let r = kmeans(&m, 2, 0, 3).unwrap();
        assert_eq!(r.partition.num_clusters(), 2);
        assert_eq!(r.wcss, 0.0);
    }
}
