use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ClassLabel;
use crate::error::{Error, Result};

/// Rows are true classes, columns predictions, both in `ClassLabel` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 3]; 3]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn record(&mut self, truth: ClassLabel, predicted: ClassLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<14}", "true \\ pred");
        for c in ClassLabel::ALL {
            let _ = write!(out, "{:>14}", c.display_name());
        }
        out.push('\n');
        for c in ClassLabel::ALL {
            let _ = write!(out, "{:<14}", c.display_name());
            for v in self.counts[c.index()] {
                let _ = write!(out, "{v:>14}");
            }
            out.push('\n');
        }
        out
    }
}

/// Percentages; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: [Option<f64>; 3],
    pub ppv: [Option<f64>; 3],
}

fn pct(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let mut sensitivity = [None; 3];
    let mut ppv = [None; 3];
    for c in 0..3 {
        sensitivity[c] = pct(cm.counts[c][c], cm.row_sum(c));
        ppv[c] = pct(cm.counts[c][c], cm.col_sum(c));
    }
    Ok(MetricsReport {
        accuracy: 100.0 * cm.trace() as f64 / total as f64,
        sensitivity,
        ppv,
    })
}

/// Minimum COVID-19 sensitivity and PPV, in percent (inclusive).
pub const CONSTRAINT_THRESHOLD: f64 = 95.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub passed: bool,
    pub reasons: Vec<String>,
}

pub fn check_operational_constraints(report: &MetricsReport) -> ConstraintCheck {
    let covid = ClassLabel::Covid19.index();
    let mut reasons = Vec::new();
    for (name, value) in [
        ("COVID-19 sensitivity", report.sensitivity[covid]),
        ("COVID-19 PPV", report.ppv[covid]),
    ] {
        match value {
            None => reasons.push(format!("{name} undefined")),
            Some(v) if v < CONSTRAINT_THRESHOLD => {
                reasons.push(format!("{name} {v:.2}% < {CONSTRAINT_THRESHOLD:.0}%"))
            }
            Some(_) => {}
        }
    }
    ConstraintCheck {
        passed: reasons.is_empty(),
        reasons,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into())
}

fn class_table(title: &str, rows: &[(&str, [Option<f64>; 3])]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).chain(["Architecture".len()]).max().unwrap_or(0);
    let mut out = format!("{title}\n{:<name_w$}", "Architecture");
    for c in ClassLabel::ALL {
        let _ = write!(out, "  {:>12}", c.display_name());
    }
    out.push('\n');
    for (name, vals) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for v in vals {
            let _ = write!(out, "  {:>12}", fmt_opt(*v));
        }
        out.push('\n');
    }
    out
}

/// Per-class sensitivity table (Normal / Non-COVID-19 / COVID-19 columns).
pub fn render_sensitivity_table(rows: &[(&str, &MetricsReport)]) -> String {
    let r: Vec<_> = rows.iter().map(|(n, m)| (*n, m.sensitivity)).collect();
    class_table("Sensitivity (%)", &r)
}

/// Per-class positive predictive value table.
pub fn render_ppv_table(rows: &[(&str, &MetricsReport)]) -> String {
    let r: Vec<_> = rows.iter().map(|(n, m)| (*n, m.ppv)).collect();
    class_table("PPV (%)", &r)
}

/// Accuracy, sensitivity and PPV of one model, plus its confusion matrix.
pub fn render_report(name: &str, cm: &ConfusionMatrix, m: &MetricsReport) -> String {
    format!(
        "Accuracy (%): {:.2} ({} of {} images)\n\n{}\n{}\nConfusion matrix\n{}",
        m.accuracy,
        cm.trace(),
        cm.total(),
        render_sensitivity_table(&[(name, m)]),
        render_ppv_table(&[(name, m)]),
        cm.render()
    )
}
