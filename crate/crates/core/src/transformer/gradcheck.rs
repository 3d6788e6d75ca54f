//! Central finite-difference check of the analytic model gradient.

use ndarray::Array2;

use super::layers::Parameters;
use super::loss::LossConfig;
use super::model::Model;
use crate::error::Result;
use crate::lineage::Window;

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub n_checked: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} parameters, max rel error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}), tolerance {:.0e}: {}",
            self.n_checked,
            self.max_rel_error,
            self.worst,
            self.analytic,
            self.numeric,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn set_param(model: &mut Model<f64>, index: usize, value: f64) {
    let mut at = 0;
    model.visit_mut("", &mut |_, xs| {
        if index >= at && index < at + xs.len() {
            xs[index - at] = value;
        }
        at += xs.len();
    });
}

/// Compares every parameter's analytic gradient with a central difference
/// of step `h`.
pub fn gradcheck(
    model: &Model<f64>,
    window: &Window,
    target: &Array2<f64>,
    weights: &Array2<f64>,
    cfg: LossConfig,
    h: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let (_, grad) = model.loss_and_grad(window, target, weights, cfg)?;
    let analytic = grad.flatten();
    let mut names = Vec::with_capacity(analytic.len());
    model.visit("", &mut |name, _, xs| {
        names.extend((0..xs.len()).map(|k| (name.to_string(), k)));
    });

    let params = model.flatten();
    let mut probe = model.clone();
    let mut report = GradcheckReport {
        n_checked: analytic.len(),
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        tolerance,
    };
    for (idx, &a) in analytic.iter().enumerate() {
        set_param(&mut probe, idx, params[idx] + h);
        let plus = probe.loss_value(window, target, weights, cfg)?;
        set_param(&mut probe, idx, params[idx] - h);
        let minus = probe.loss_value(window, target, weights, cfg)?;
        set_param(&mut probe, idx, params[idx]);
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = format!("{}[{}]", names[idx].0, names[idx].1);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
