//! Central finite-difference verification of reverse-mode gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors.
const REL_FLOOR: f64 = 1e-8;

/// Check the analytic gradient of a scalar-valued `f` at `point` against
/// central finite differences with step `eps`, returning the maximum relative
/// error over the checked coordinates.
///
/// Coordinates sitting on (or within ~10*eps of) a kink of `f` are excluded:
/// a kink is detected when the one-sided difference quotients disagree, probed
/// at both `eps` and `10*eps`. The numeric side never consults the graph, so
/// this is an independent oracle for `backward`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "finite_diff_check",
            msg: "eps must be positive".into(),
        });
    }

    let leaf = point.with_grad();
    let out = f(&leaf)?;
    if !out.is_scalar() {
        return Err(Error::InvalidShape {
            op: "finite_diff_check",
            expected: "scalar-valued function",
            got: out.shape().to_vec(),
        });
    }
    let base = out.value();
    let grads = out.backward(false)?;
    let analytic: Vec<f64> = match grads.grad(&leaf) {
        Some(g) => g.data().to_vec(),
        // Output does not depend on the input at all.
        None => vec![0.0; point.numel()],
    };

    let eval = |data: &[f64]| -> Result<f64> {
        let probe = Tensor::new(point.shape(), data.to_vec())?;
        Ok(f(&probe)?.value())
    };

    let mut max_rel = 0.0f64;
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];

        data[i] = orig + eps;
        let f_plus = eval(&data)?;
        data[i] = orig - eps;
        let f_minus = eval(&data)?;
        data[i] = orig + 10.0 * eps;
        let f_plus10 = eval(&data)?;
        data[i] = orig - 10.0 * eps;
        let f_minus10 = eval(&data)?;
        data[i] = orig;

        if straddles_kink(base, f_plus, f_minus, eps)
            || straddles_kink(base, f_plus10, f_minus10, 10.0 * eps)
        {
            continue;
        }

        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn straddles_kink(f0: f64, f_plus: f64, f_minus: f64, eps: f64) -> bool {
    let fwd = (f_plus - f0) / eps;
    let bwd = (f0 - f_minus) / eps;
    (fwd - bwd).abs() > 0.05 * fwd.abs().max(bwd.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratic() {
        let p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = finite_diff_check(|x| x.mul(x)?.sum(), &p, 1e-5).unwrap();
        assert!(err < 1e-8, "quadratic error {err}");
    }

    #[test]
    fn sigmoid_composite_is_tight() {
        let p = Tensor::new(&[3], vec![0.37, -1.21, 0.64]).unwrap();
        let err = finite_diff_check(|x| x.sigmoid()?.mul(&x.sigmoid()?)?.sum(), &p, 1e-5).unwrap();
        assert!(err < 1e-6, "sigmoid composite error {err}");
    }

    #[test]
    fn relu_kink_coordinate_is_excluded() {
        // Middle coordinate sits exactly on the relu kink; its one-sided
        // slopes disagree, so only the smooth coordinates are compared.
        let p = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let err = finite_diff_check(|x| x.relu()?.sum(), &p, 1e-5).unwrap();
        assert!(err < 1e-9, "relu away-from-kink error {err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let p = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(finite_diff_check(|x| x.sum(), &p, 0.0).is_err());
    }

    #[test]
    fn rejects_non_scalar_function() {
        let p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(finite_diff_check(|x| x.mul(x), &p, 1e-5).is_err());
    }
}
