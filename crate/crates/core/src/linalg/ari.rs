use super::{LinalgError, Partition};
use std::collections::HashMap;

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Chance-corrected agreement between two partitions.
///
/// Returns [`LinalgError::UndefinedIndex`] when the expected and maximum
/// index coincide (e.g. both partitions are a single cluster).
pub fn adjusted_rand_index(a: &Partition, b: &Partition) -> Result<f64, LinalgError> {
    if a.len() != b.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "partitions of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(LinalgError::TooFewRows {
            rows: a.len(),
            needed: 2,
        });
    }
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
        *cells.entry((x, y)).or_default() += 1;
    }
    // Accumulate in key order so the float sum is reproducible.
    let sorted_sum = |m: &HashMap<usize, usize>| {
        let mut v: Vec<_> = m.iter().collect();
        v.sort();
        v.into_iter().map(|(_, &c)| comb2(c)).sum::<f64>()
    };
    let mut cell_list: Vec<_> = cells.iter().collect();
    cell_list.sort();
    let index: f64 = cell_list.into_iter().map(|(_, &c)| comb2(c)).sum();
    let sum_a = sorted_sum(&rows);
    let sum_b = sorted_sum(&cols);
    let expected = sum_a * sum_b / comb2(a.len());
    let max = 0.5 * (sum_a + sum_b);
    let denom = max - expected;
    if denom == 0.0 {
        return Err(LinalgError::UndefinedIndex);
    }
    Ok((index - expected) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[usize]) -> Partition {
        Partition(v.to_vec())
    }

    #[test]
    fn identical_and_relabeled() {
        let a = p(&[0, 0, 1, 1, 2]);
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        let b = p(&[1, 1, 0, 0, 5]);
        assert_eq!(adjusted_rand_index(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn crossed_partitions() {
        let v = adjusted_rand_index(&p(&[0, 0, 1, 1]), &p(&[0, 1, 0, 1])).unwrap();
        assert!((v + 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(adjusted_rand_index(&p(&[0, 1]), &p(&[0])).is_err());
        assert_eq!(
            adjusted_rand_index(&p(&[0, 0, 0]), &p(&[1, 1, 1])),
            Err(LinalgError::UndefinedIndex)
        );
    }
}
