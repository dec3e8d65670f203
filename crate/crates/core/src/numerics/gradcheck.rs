use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub num_params: usize,
    pub pass: bool,
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every index.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        for value in [up, down] {
            if !value.is_finite() {
                return Err(Error::NonFiniteValue { index: i, value });
            }
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

pub fn grad_check(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for (&a, &n) in analytic.iter().zip(numeric) {
        max_abs = max_abs.max((a - n).abs());
        max_rel = max_rel.max(relative_error(a, n));
    }
    GradCheckReport {
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        num_params: analytic.len(),
        pass: max_rel <= tolerance,
    }
}
