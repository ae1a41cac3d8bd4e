//! Central-difference verification of analytical gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing an analytical gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport<T> {
    pub max_rel_err: T,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytical: T,
    pub numerical: T,
    pub pass: bool,
}

/// Central differences `(f(p+h) − f(p−h)) / 2h` at every coordinate of
/// `point`, with `h = step·(1 + |p_i|)`.
pub fn central_differences<T, F>(mut f: F, point: &[T], step: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if !(step > T::zero()) {
        return Err(Error::Domain(format!("grad_check: step {step} must be positive")));
    }
    let mut eval = |p: &[T]| -> Result<T> {
        let v = f(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Eval(format!("grad_check: objective evaluated to {v}")))
        }
    };
    let mut p = point.to_vec();
    eval(&p)?;
    let two = T::c(2.0);
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        let h = step * (T::one() + orig.abs());
        p[i] = orig + h;
        let up = eval(&p)?;
        p[i] = orig - h;
        let down = eval(&p)?;
        p[i] = orig;
        out.push((up - down) / (two * h));
    }
    Ok(out)
}

/// Worst per-coordinate `|a − n| / max(|a|, |n|, 1e−8)` between two gradients.
pub fn compare<T: Scalar>(analytical: &[T], numerical: &[T], tolerance: T) -> GradReport<T> {
    let floor = T::c(1e-8);
    let mut report = GradReport {
        max_rel_err: T::zero(),
        worst_index: 0,
        analytical: T::zero(),
        numerical: T::zero(),
        pass: true,
    };
    for (i, (&a, &n)) in analytical.iter().zip(numerical).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > report.max_rel_err || i == 0 {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytical = a;
            report.numerical = n;
        }
    }
    report.pass = report.max_rel_err <= tolerance;
    report
}

/// Compares `analytical` against [`central_differences`] of `f` at `point`.
pub fn grad_check<T, F>(f: F, point: &[T], analytical: &[T], step: T, tolerance: T) -> Result<GradReport<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if point.len() != analytical.len() {
        return Err(Error::Domain(format!(
            "grad_check: {} coordinates but {} gradient entries",
            point.len(),
            analytical.len()
        )));
    }
    let numerical = central_differences(f, point, step)?;
    Ok(compare(analytical, &numerical, tolerance))
}
