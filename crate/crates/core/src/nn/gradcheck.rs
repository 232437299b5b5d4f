use alloc::vec::Vec;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` occurred.
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub n_checked: usize,
}

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Per-coordinate relative error `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central differences of `loss` around `point`, compared with `analytic`.
pub fn gradient_check<F>(point: &[f64], analytic: &[f64], mut loss: F, step: f64, tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
    let numeric = central_differences(point, &mut loss, step);
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        tolerance,
        passed: worst.0 <= tolerance,
        n_checked: point.len(),
    }
}

pub fn central_differences<F>(point: &[f64], loss: &mut F, step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}
