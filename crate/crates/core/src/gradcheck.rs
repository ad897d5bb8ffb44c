//! Central finite-difference gradient checking.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h probes crossed a non-differentiable point.
    pub skipped: usize,
    /// `(parameter, element)` with the largest relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// `loss` returns the objective and a signature of its piecewise-linear
/// regime (e.g. a hash of ReLU masks). Coordinates whose `+h` and `-h`
/// probes land in different regimes are skipped. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_diff_check<F>(
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    h: f64,
    floor: f64,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&[Vec<f64>]) -> (f64, u64),
{
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let orig = p[j];
            work[pi][j] = orig + h;
            let (up, sig_up) = loss(&work);
            work[pi][j] = orig - h;
            let (down, sig_down) = loss(&work);
            work[pi][j] = orig;
            if sig_up != sig_down {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, j));
            }
        }
    }
    report
}
