//! Central finite-difference gradient verification.

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    /// Worst-case merge of two reports.
    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
            tolerance: self.tolerance.min(other.tolerance),
        }
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
///
/// The error of component `i` is `|a_i − n_i| / max(|a_i|, |n_i|, floor)`
/// where `floor = 1e-3 · max_j |a_j|`, so components that are tiny
/// compared to the gradient as a whole are judged on an absolute scale
/// rather than on their last few bits.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], tolerance: f64) -> GradReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length must match input");
    let numeric = numeric_gradient(&f, x);
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    GradReport { max_rel_err, checked: x.len(), tolerance }
}

pub fn numeric_gradient<F>(f: &F, x: &[f64]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}
