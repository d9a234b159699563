//! Central finite-difference oracle for analytic gradients.

use crate::tensor::TensorError;

/// Result of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Max over all coordinates of
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
pub fn finite_diff_check<F>(
    f: F,
    analytic: &[f64],
    params: &[f64],
    step: f64,
) -> Result<FdReport, TensorError>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_coords(f, analytic, params, step, &coords)
}

/// As [`finite_diff_check`], restricted to the listed coordinates.
pub fn finite_diff_check_coords<F>(
    mut f: F,
    analytic: &[f64],
    params: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<FdReport, TensorError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(TensorError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if analytic.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "finite_diff_check",
            lhs: vec![analytic.len()],
            rhs: vec![params.len()],
        });
    }
    let mut x = params.to_vec();
    let mut report: Option<FdReport> = None;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite("finite_diff_check"));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if report.as_ref().is_none_or(|r| err > r.max_relative_error) {
            report = Some(FdReport {
                max_relative_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            });
        }
    }
    report.ok_or_else(|| TensorError::InvalidArgument("no coordinates to check".into()))
}
