//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// A named float64 input of the function under test.
#[derive(Clone, Debug)]
pub struct Variable {
    pub name: String,
    pub values: Vec<f64>,
}

impl Variable {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Variable {
            name: name.into(),
            values,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Set when a loss or gradient evaluated to NaN/Inf.
    pub non_finite: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(msg) = &self.non_finite {
            return write!(f, "gradient check failed: non-finite {msg}");
        }
        write!(
            f,
            "max rel err {:.3e} (tol {:.0e})",
            self.max_rel_err, self.tolerance
        )?;
        for e in &self.entries {
            write!(
                f,
                "; {}[{}]: {:.3e} (analytic {:.6e}, numeric {:.6e})",
                e.name, e.worst_index, e.max_rel_err, e.analytic, e.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient returned by `f` at `point` against central
/// differences with step `step` for every scalar of every variable.
///
/// `f` maps variable values to `(loss, gradient per variable)`.
pub fn grad_check<F>(point: &[Variable], mut f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if !(1e-5..=1e-3).contains(&step) {
        return Err(Error::Argument(format!(
            "finite-difference step {step} outside [1e-5, 1e-3]"
        )));
    }
    let mut values: Vec<Vec<f64>> = point.iter().map(|v| v.values.clone()).collect();
    let fail = |msg: String| GradCheckReport {
        entries: Vec::new(),
        max_rel_err: f64::INFINITY,
        tolerance,
        non_finite: Some(msg),
    };

    let (loss, analytic) = f(&values)?;
    if !loss.is_finite() {
        return Ok(fail("loss at base point".into()));
    }
    if analytic.len() != point.len() {
        return Err(Error::Internal(format!(
            "{} gradients for {} variables",
            analytic.len(),
            point.len()
        )));
    }
    for (var, g) in point.iter().zip(&analytic) {
        if g.len() != var.values.len() {
            return Err(Error::Internal(format!(
                "gradient for `{}` has {} entries, expected {}",
                var.name,
                g.len(),
                var.values.len()
            )));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Ok(fail(format!("analytic gradient {}[{i}]", var.name)));
        }
    }

    let mut entries = Vec::with_capacity(point.len());
    for (vi, var) in point.iter().enumerate() {
        let mut entry = GradCheckEntry {
            name: var.name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..var.values.len() {
            let orig = values[vi][i];
            values[vi][i] = orig + step;
            let (plus, _) = f(&values)?;
            values[vi][i] = orig - step;
            let (minus, _) = f(&values)?;
            values[vi][i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Ok(fail(format!("numeric gradient {}[{i}]", var.name)));
            }
            let a = analytic[vi][i];
            let err = relative_error(a, numeric);
            if i == 0 || err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        tolerance,
        non_finite: None,
    })
}
