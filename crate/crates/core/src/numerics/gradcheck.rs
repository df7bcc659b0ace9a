//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function `f` at `x` against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Var<T>) -> Result<Var<T>>,
{
    finite_diff_check_coords(f, x, h, tol, 0..x.numel())
}

/// Same as [`finite_diff_check`] restricted to the given flat coordinates.
pub fn finite_diff_check_coords<T, F, I>(f: F, x: &Tensor<T>, h: f64, tol: f64, coords: I) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Var<T>) -> Result<Var<T>>,
    I: IntoIterator<Item = usize>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&leaf)?;
    if !out.value().is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    let grad = out.backward()?.wrt(&leaf)?;
    drop(out);
    tape.reset();

    let eval = |data: Vec<T>| -> Result<f64> {
        let v = Var::constant(Tensor::from_vec(x.shape(), data)?);
        let y = f(&v)?.value().item()?.to_f64_lossy();
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(y)
    };

    let base = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: 0,
        tol,
        pass: true,
    };
    for i in coords {
        let mut plus = base.clone();
        plus[i] = plus[i] + T::lit(h);
        let mut minus = base.clone();
        minus[i] = minus[i] - T::lit(h);
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let an = grad.data()[i].to_f64_lossy();
        let r = rel_err(an, fd);
        report.max_abs_err = report.max_abs_err.max((an - fd).abs());
        if r > report.max_rel_err {
            report.max_rel_err = r;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64).sin() * 3.0).unwrap();
        let r = finite_diff_check(|v: &Var<f64>| v.sum_all(), &x, 1e-5, 1e-9).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_err < 1e-9);
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn matmul_wrt_left_operand() {
        let q = Tensor::from_fn(&[3, 4], |i| ((i * 7) as f64 * 0.13).cos()).unwrap();
        let k = Var::constant(Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.71).sin()).unwrap());
        let r = finite_diff_check(|v: &Var<f64>| v.matmul(&k)?.sum_all(), &q, 1e-5, 1e-6).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::from_fn(&[2], |i| i as f64).unwrap();
        assert!(finite_diff_check(|v: &Var<f64>| v.sum_all(), &x, 0.0, 1e-6).is_err());
        let err = finite_diff_check(
            |v: &Var<f64>| v.div(&Var::constant(Tensor::from_vec(&[2], vec![0.0, 1.0])?))?.sum_all(),
            &x,
            1e-5,
            1e-6,
        );
        assert!(err.is_err());
        let inf = Tensor::from_vec(&[1], vec![f64::INFINITY]).unwrap();
        assert!(matches!(
            finite_diff_check(|v: &Var<f64>| v.sum_all(), &inf, 1e-5, 1e-6),
            Err(Error::NonFinite { .. })
        ));
    }
}
