//! Central-difference gradient oracle.
//!
//! The relative error of coordinate `i` is
//! `|analytic_i - numeric_i| / (|analytic_i| + 1e-8)` with
//! `numeric_i = (f(x + h e_i) - f(x - h e_i)) / 2h`. The mixed variant
//! divides by `max(|analytic_i|, |numeric_i|) + 1e-6` instead, so entries
//! whose true gradient is rounding noise are judged in absolute terms.

use alloc::vec::Vec;

use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-8;
pub const MIXED_FLOOR: f64 = 1e-6;

pub fn mixed_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + MIXED_FLOOR)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradcheckError {
    #[error("function returned non-finite value {value} while probing coordinate {coord}")]
    NonFinite { coord: usize, value: f64 },
    #[error("analytic gradient has dims {analytic:?}, input has {input:?}")]
    Shape { analytic: Vec<usize>, input: Vec<usize> },
    #[error("step must be positive, got {0}")]
    BadStep(f64),
}

/// Worst coordinate found by a probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOutcome {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max relative error over every coordinate of `x`.
pub fn finite_diff_check(
    f: impl FnMut(&Tensor) -> Result<f64, GradcheckError>,
    analytic: impl FnOnce(&Tensor) -> Tensor,
    x: &Tensor,
    h: f64,
) -> Result<f64, GradcheckError> {
    let grad = analytic(x);
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_report(f, &grad, x, h, &coords).map(|o| o.max_rel_err)
}

/// Probe only `coords` (flat indices) and report the worst one.
pub fn finite_diff_report(
    f: impl FnMut(&Tensor) -> Result<f64, GradcheckError>,
    analytic: &Tensor,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<GradcheckOutcome, GradcheckError> {
    probe(f, analytic, x, h, coords, |a, n| {
        (a - n).abs() / (a.abs() + DENOM_FLOOR)
    })
}

/// [`finite_diff_report`] under the mixed error.
pub fn finite_diff_mixed(
    f: impl FnMut(&Tensor) -> Result<f64, GradcheckError>,
    analytic: &Tensor,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<GradcheckOutcome, GradcheckError> {
    probe(f, analytic, x, h, coords, mixed_error)
}

fn probe(
    mut f: impl FnMut(&Tensor) -> Result<f64, GradcheckError>,
    analytic: &Tensor,
    x: &Tensor,
    h: f64,
    coords: &[usize],
    metric: fn(f64, f64) -> f64,
) -> Result<GradcheckOutcome, GradcheckError> {
    if !(h > 0.0) {
        return Err(GradcheckError::BadStep(h));
    }
    if analytic.dims() != x.dims() {
        return Err(GradcheckError::Shape {
            analytic: analytic.dims().to_vec(),
            input: x.dims().to_vec(),
        });
    }
    let mut probe = x.clone();
    let mut worst = GradcheckOutcome {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in coords {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        for v in [fp, fm] {
            if !v.is_finite() {
                return Err(GradcheckError::NonFinite { coord: i, value: v });
            }
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let err = metric(a, numeric);
        if err > worst.max_rel_err || i == coords[0] {
            worst = GradcheckOutcome {
                max_rel_err: err,
                worst_coord: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three_is_exact() {
        let x = Tensor::scalar(3.0);
        let err = finite_diff_check(
            |x| Ok(x.item() * x.item()),
            |x| Tensor::scalar(2.0 * x.item()),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let x = Tensor::vector(alloc::vec![3.0, -1.5]).unwrap();
        let err = finite_diff_check(
            |x| Ok(x.data().iter().map(|v| v * v).sum()),
            |x| x.map(|v| 4.0 * v),
            &x,
            1e-4,
        )
        .unwrap();
        // analytic = 2 * numeric => |2n - n| / |2n| = 0.5; off by 2x the
        // other way round gives 1.0.
        assert!((err - 0.5).abs() < 1e-6, "{err}");
        let err = finite_diff_check(|x| Ok(x.data().iter().map(|v| v * v).sum()), |x| x.map(|v| v), &x, 1e-4).unwrap();
        assert!((err - 1.0).abs() < 1e-6, "{err}");
        assert!(err > 1e-4);
    }

    #[test]
    fn rejects_non_finite_and_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            finite_diff_check(|_| Ok(f64::INFINITY), |x| x.clone(), &x, 1e-4),
            Err(GradcheckError::NonFinite { .. })
        ));
        assert!(matches!(
            finite_diff_check(|x| Ok(x.item()), |x| x.clone(), &x, 0.0),
            Err(GradcheckError::BadStep(_))
        ));
    }
}
