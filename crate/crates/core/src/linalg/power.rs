use super::{LinalgError, Matrix};

const TOL: f64 = 1e-10;
const MAX_ITER: usize = 1000;
/// `(MᵀM)^(2^SQUARINGS)` is formed before iterating, so that near-ties in
/// the spectrum still separate within the iteration budget.
const SQUARINGS: usize = 20;

/// Result of [`power_iteration`].
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration {
    /// Unit-norm dominant right singular vector, largest-magnitude entry positive.
    pub vector: Vec<f64>,
    /// Rayleigh quotient `vᵀ MᵀM v` (the squared top singular value).
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Dominant right singular vector of `m` (no centering is applied).
pub fn top_singular_vector(m: &Matrix) -> Result<Vec<f64>, LinalgError> {
    power_iteration(m).map(|p| p.vector)
}

/// Power iteration on `MᵀM`.
///
/// The Gram matrix is first raised to a large power by repeated squaring,
/// giving the starting vector; plain iterations `v ← MᵀM v / ‖MᵀM v‖` then
/// run until successive iterates differ by less than `1e-10` or 1000 steps.
pub fn power_iteration(m: &Matrix) -> Result<PowerIteration, LinalgError> {
    if m.rows() < 2 {
        return Err(LinalgError::TooFewRows {
            rows: m.rows(),
            needed: 2,
        });
    }
    let n = m.cols();
    let g = m.gram();
    let trace: f64 = (0..n).map(|i| g[i * n + i]).sum();
    if trace <= 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }

    let mut s: Vec<f64> = g.iter().map(|v| v / trace).collect();
    let mut tmp = vec![0.0; n * n];
    for _ in 0..SQUARINGS {
        crate::tensor::gemm(
            n,
            n,
            n,
            &s,
            crate::tensor::Layout::Normal,
            &s,
            crate::tensor::Layout::Normal,
            0.0,
            &mut tmp,
        );
        let tr: f64 = (0..n).map(|i| tmp[i * n + i]).sum();
        if tr <= f64::MIN_POSITIVE {
            break;
        }
        tmp.iter_mut().for_each(|v| *v /= tr);
        std::mem::swap(&mut s, &mut tmp);
    }

    // Start from the column of the powered matrix with the largest norm: it
    // is never orthogonal to the dominant subspace.
    let best_col = (0..n)
        .max_by(|&a, &b| {
            let na: f64 = (0..n).map(|i| s[i * n + a].powi(2)).sum();
            let nb: f64 = (0..n).map(|i| s[i * n + b].powi(2)).sum();
            na.total_cmp(&nb).then(b.cmp(&a))
        })
        .unwrap_or(0);
    let mut v: Vec<f64> = (0..n).map(|i| s[i * n + best_col]).collect();
    if !normalize(&mut v) {
        v = vec![0.0; n];
        v[0] = 1.0;
    }
    fix_sign(&mut v);

    let mut iterations = 0;
    let mut converged = false;
    let mut next = vec![0.0; n];
    while iterations < MAX_ITER {
        iterations += 1;
        matvec(&g, &v, &mut next);
        if !normalize(&mut next) {
            return Err(LinalgError::ZeroMatrix);
        }
        fix_sign(&mut next);
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut next);
        if diff < TOL {
            converged = true;
            break;
        }
    }
    matvec(&g, &v, &mut next);
    let eigenvalue = v.iter().zip(&next).map(|(a, b)| a * b).sum();
    Ok(PowerIteration {
        vector: v,
        eigenvalue,
        iterations,
        converged,
    })
}

fn matvec(g: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = g[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= f64::MIN_POSITIVE || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

fn fix_sign(v: &mut [f64]) {
    let idx = (0..v.len())
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
        .unwrap_or(0);
    if v.get(idx).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let p = power_iteration(&m).unwrap();
        assert!((p.vector[0] - 1.0).abs() < 1e-12);
        assert!(p.vector[1].abs() < 1e-12);
        assert!((p.eigenvalue - 4.0).abs() < 1e-9);
        assert!(p.converged);
    }

    #[test]
    fn sign_convention() {
        let m = Matrix::from_rows(&[vec![-3.0, 1.0], vec![-3.0, 1.0]]).unwrap();
        let v = top_singular_vector(&m).unwrap();
        assert!(v[0] > 0.0);
        assert!(v[1] < 0.0);
    }

    #[test]
    fn tie_gives_vector_in_dominant_subspace() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.5]]).unwrap();
        let p = power_iteration(&m).unwrap();
        let g = m.gram();
        let mut gv = vec![0.0; 3];
        matvec(&g, &p.vector, &mut gv);
        let resid: f64 = gv
            .iter()
            .zip(&p.vector)
            .map(|(a, b)| (a - p.eigenvalue * b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(resid <= 1e-6);
        assert!((p.eigenvalue - 1.0).abs() < 1e-9);
        let norm: f64 = p.vector.iter().map(|x| x * x).sum::<f64>();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(power_iteration(&Matrix::zeros(3, 2)), Err(LinalgError::ZeroMatrix));
        assert!(matches!(
            power_iteration(&Matrix::zeros(1, 2)),
            Err(LinalgError::TooFewRows { .. })
        ));
    }
}
