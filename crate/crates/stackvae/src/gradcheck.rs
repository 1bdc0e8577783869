//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Worst-case comparison between an analytic gradient and central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst parameter.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor so that near-zero pairs do not blow up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare `analytic` against `(loss(p+h) - loss(p-h)) / 2h` for every
/// parameter. `params` is restored to its original values on return.
pub fn gradient_check<F>(
    mut loss: F,
    params: &mut [f64],
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArg(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "gradient_check",
            format!("{} gradients", params.len()),
            format!("{}", analytic.len()),
        ));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let plus = loss(params);
        params[i] = orig - h;
        let minus = loss(params);
        params[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = rel_err(analytic[i], numeric);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_exact_up_to_rounding() {
        // loss = sum(p^2), gradient 2p: central differences are exact for
        // quadratics, so only rounding remains.
        let mut p = vec![0.7, -1.3, 2.4, 0.0];
        let analytic: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let report =
            gradient_check(|q| q.iter().map(|x| x * x).sum(), &mut p, &analytic, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
        assert_eq!(p, vec![0.7, -1.3, 2.4, 0.0]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut p = vec![1.0, 2.0];
        let analytic = vec![2.0, 3.0]; // second entry is wrong (should be 4)
        let report =
            gradient_check(|q| q.iter().map(|x| x * x).sum(), &mut p, &analytic, 1e-5).unwrap();
        assert_eq!(report.worst_index, 1);
        assert!(report.max_rel_err > 0.2);
    }

    #[test]
    fn zero_step_is_an_argument_error() {
        let mut p = vec![1.0];
        assert!(gradient_check(|_| 0.0, &mut p, &[0.0], 0.0).is_err());
    }
}
