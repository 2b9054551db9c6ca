//! Central-difference gradient verification.

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    /// First coordinate where either side was not finite.
    pub non_finite_at: Option<usize>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite_at.is_none() && self.max_rel_error < tol
    }
}

/// Compares `grad(point)` against central differences of `value`.
///
/// `value` and `grad` are separate closures so the analytic gradient is
/// computed once at the base point while the numeric side re-evaluates the
/// function at `2·n` perturbed points.
pub fn grad_check<F, G>(mut value: F, grad: G, point: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    let analytic = grad(point);
    assert_eq!(analytic.len(), point.len(), "gradient length must match point");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        non_finite_at: None,
    };
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = value(&x);
        x[i] = orig - eps;
        let fm = value(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            report.non_finite_at.get_or_insert(i);
            report.max_rel_error = f64::INFINITY;
            continue;
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_at_two() {
        let r = grad_check(|x| x[0].powi(3), |x| vec![3.0 * x[0] * x[0]], &[2.0], 1e-5);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn linear_is_exact() {
        let w = [0.5, -2.0, 3.25];
        let r = grad_check(
            |x| x.iter().zip(&w).map(|(a, b)| a * b).sum(),
            |_| w.to_vec(),
            &[1.0, 2.0, -4.0],
            1e-5,
        );
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn nan_reports_coordinate() {
        let r = grad_check(
            |x| if x[1] > 0.0 { f64::NAN } else { x[0] },
            |_| vec![1.0, 0.0],
            &[0.0, 0.0],
            1e-5,
        );
        assert_eq!(r.non_finite_at, Some(1));
        assert!(!r.passed(1e-4));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = grad_check(|x| x[0] * x[0], |x| vec![x[0]], &[3.0], 1e-5);
        assert!(!r.passed(1e-4));
    }
}
