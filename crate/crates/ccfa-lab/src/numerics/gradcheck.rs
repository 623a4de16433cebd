//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Outcome of one finite-difference sweep over a point.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probe_count: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            probe_count: self.probe_count + other.probe_count,
        }
    }
}

/// Compare `grad_fn(point)` against central differences of `loss_fn`,
/// coordinate by coordinate.
///
/// The relative error per coordinate is `|fd - g| / max(|fd|, |g|, 1)`, so
/// coordinates with near-zero gradient are judged on absolute error.
pub fn finite_diff_check(
    loss_fn: &dyn Fn(&Matrix) -> f64,
    grad_fn: &dyn Fn(&Matrix) -> Matrix,
    point: &Matrix,
    h: f64,
) -> Result<GradCheckReport> {
    assert!(h > 0.0, "step size must be positive");
    let analytic = grad_fn(point);
    assert_eq!(
        analytic.shape(),
        point.shape(),
        "gradient shape must match point shape"
    );

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let (rows, cols) = point.shape();
    let mut probe = point.clone();
    for i in 0..rows {
        for j in 0..cols {
            let orig = probe.get(i, j);
            probe.set(i, j, orig + h);
            let f_plus = loss_fn(&probe);
            probe.set(i, j, orig - h);
            let f_minus = loss_fn(&probe);
            probe.set(i, j, orig);
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    context: "finite_diff_check probe",
                    row: i,
                    col: j,
                });
            }
            let fd = (f_plus - f_minus) / (2.0 * h);
            let g = analytic.get(i, j);
            let abs = (fd - g).abs();
            let rel = abs / fd.abs().max(g.abs()).max(1.0);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        probe_count: rows * cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn quadratic_is_exact_to_fd_precision() {
        let loss = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
        let grad = |m: &Matrix| m.scale(2.0);
        let mut rng = Rng::new(1);
        let point = rng.gaussian_matrix(4, 3);
        let report = finite_diff_check(&loss, &grad, &point, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-8, "rel {}", report.max_rel_err);
        assert_eq!(report.probe_count, 12);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        // Loss is finite at the point but log(1 - 2) is NaN when the minus
        // probe reaches coordinate (0, 1).
        let loss = |m: &Matrix| m.get(0, 1).ln();
        let grad = |m: &Matrix| m.map(|_| 0.0);
        let point = Matrix::from_rows(&[&[1.0, 1.0, 1.0]]);
        let err = finite_diff_check(&loss, &grad, &point, 2.0).unwrap_err();
        match err {
            Error::NonFinite { row, col, .. } => {
                assert_eq!((row, col), (0, 1));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        let loss = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
        let grad = |m: &Matrix| m.scale(3.0); // wrong on purpose
        let point = Matrix::from_rows(&[&[1.0, -2.0]]);
        let report = finite_diff_check(&loss, &grad, &point, 1e-6).unwrap();
        assert!(report.max_rel_err > 0.1);
    }
}
