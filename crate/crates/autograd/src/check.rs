//! Central finite differences, used as an oracle for analytic gradients.
//!
//! Only forward evaluations of the objective are used here, so the oracle is
//! independent of the tape's backward rules.

use crate::Tensor;

/// Per-element comparison of analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// (parameter tensor, element) with the largest relative error.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Numeric gradient of `f` at `params` by `(f(p + h) - f(p - h)) / 2h`.
pub fn central_differences(
    params: &[Tensor<f64>],
    step: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Tensor::zeros(params[t].shape().to_vec());
        for i in 0..params[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`; `floor` keeps
/// near-zero gradients from dominating through division.
pub fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>], floor: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient list length mismatch");
    let mut report = GradCheckReport {
        checked: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    for (t, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch at {t}");
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (x - y).abs();
            let rel = abs / x.abs().max(y.abs()).max(floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (t, i);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn differences_of_a_quadratic_are_exact_up_to_rounding() {
        let p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5])];
        let g = central_differences(&p, 1e-4, |ps| ps[0].data().iter().map(|x| x * x).sum());
        for (x, d) in p[0].data().iter().zip(g[0].data()) {
            assert!((2.0 * x - d).abs() < 1e-8);
        }
    }

    #[test]
    fn compare_reports_worst_element() {
        let a = vec![Tensor::new(vec![2], vec![1.0, 2.0])];
        let n = vec![Tensor::new(vec![2], vec![1.0, 2.2])];
        let r = compare(&a, &n, 1e-8);
        assert_eq!(r.worst, (0, 1));
        assert!((r.max_rel_error - 0.2 / 2.2).abs() < 1e-12);
        assert!(!r.passes(1e-3));
    }
}
