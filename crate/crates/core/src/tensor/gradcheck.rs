use super::{Tape, Tensor, TensorError, Var};

/// Denominator floor of the relative error, so that near-zero gradients
/// are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

/// One-sided slopes that disagree by more than this (relative) mark a
/// non-differentiable point, which is skipped.
const KINK_TOL: f64 = 1e-4;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because they sit on a kink (e.g. relu at 0).
    pub excluded: usize,
}

/// Compares tape gradients of `f` against central differences at `inputs`.
///
/// `f` receives one leaf per input tensor and must return a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("eps {eps} outside [1e-8, 1e-3]"),
        });
    }
    let eval = |point: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point
            .iter()
            .map(|t| tape.leaf(t.shape().to_vec(), t.data().to_vec(), false))
            .collect::<Result<_, _>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: tape.shape(out).to_vec(),
            });
        }
        if !v[0].is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let base = eval(inputs)?;

    let mut point: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            point[i].data_mut()[j] = orig + eps;
            let plus = eval(&point)?;
            point[i].data_mut()[j] = orig - eps;
            let minus = eval(&point)?;
            point[i].data_mut()[j] = orig;

            let fwd = (plus - base) / eps;
            let bwd = (base - minus) / eps;
            if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;

    #[test]
    fn relu_at_zero_is_excluded() {
        let x = Tensor::new(vec![3], vec![0.0, 1.5, -2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let a = t.activation(v[0], Activation::Relu)?;
                t.sum(a)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error <= 1e-6);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-1).is_err());
    }

    #[test]
    fn non_finite_value_rejected() {
        let res = grad_check(
            |t, v| t.axpby(f64::MAX, v[0], f64::MAX, v[0]).and_then(|s| t.sum(s)),
            &[Tensor::scalar(1.0)],
            1e-6,
        );
        assert!(matches!(res, Err(TensorError::NonFinite { .. })));
    }
}
