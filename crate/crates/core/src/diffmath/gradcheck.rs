//! Central finite-difference verification of analytic gradients.

use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::DiffError;

/// Rounding units assumed lost when a deep graph is evaluated; the observed
/// error of central differences on the objectives is 1 to 2 units.
const ROUNDOFF_ULPS: f64 = 10.0;

/// Settings for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Check at most this many entries per parameter (evenly strided); `None` checks all.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index with the largest error.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
    /// Absolute error explained by rounding in the central difference,
    /// `ROUNDOFF_ULPS * eps * max(|f|, 1) / step`.
    pub roundoff: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-8)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences, parameter entry by parameter entry.
///
/// Gradients so small that the difference quotient is dominated by rounding
/// are judged against that rounding level: the denominator of the relative
/// error never drops below `roundoff / tolerance`.
///
/// `f` must be deterministic: any random noise it uses has to be drawn once
/// outside and captured.
pub fn finite_difference_check<T, E, F>(
    store: &mut ParamStore<T>,
    cfg: GradCheckConfig,
    mut f: F,
) -> Result<GradCheckReport, E>
where
    T: Scalar,
    E: From<DiffError>,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var, E>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward_into(loss, store)?;
    let f0 = g.scalar(loss).as_f64();
    let analytic: Vec<Vec<T>> = store.ids().map(|id| store.grad(id).data().to_vec()).collect();
    store.zero_grads();

    let h = T::lit(cfg.step);
    let mut eval = |store: &ParamStore<T>| -> Result<f64, E> {
        let mut g = Graph::new();
        let v = f(&mut g, store)?;
        Ok(g.scalar(v).as_f64())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
        tolerance: cfg.tolerance,
        roundoff: ROUNDOFF_ULPS * T::epsilon().as_f64() * f0.abs().max(1.0) / cfg.step,
        passed: true,
    };
    let floor = (report.roundoff / cfg.tolerance).max(1e-8);
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.value(id).len();
        let stride = match cfg.max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[pi][i].as_f64();
            let err = relative_error_with_floor(a, numeric, floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}
