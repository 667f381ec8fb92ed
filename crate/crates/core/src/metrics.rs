//! Error metrics in mV and the supply-tolerance violation count.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Errors beyond this fraction of V_DD count as violations.
pub const VIOLATION_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NrmseBasis {
    /// RMSE divided by `max(label) − min(label)`.
    Range,
    /// Constant labels: RMSE divided by `|mean(label)|` (or 1 when that is 0).
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae_mv: f64,
    pub maxe_mv: f64,
    pub rmse_mv: f64,
    pub nrmse_pct: f64,
    pub nrmse_basis: NrmseBasis,
    pub mean_pred_mv: f64,
    pub max_pred_mv: f64,
    pub mean_label_mv: f64,
    pub max_label_mv: f64,
    pub violation_threshold_mv: f64,
    pub n_violations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predict_seconds: Option<f64>,
}

pub fn compute_report(pred: &[f64], labels: &[f64], vdd_mv: f64) -> Result<EvalReport> {
    if pred.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::validation("cannot evaluate zero predictions"));
    }
    if let Some(bad) = pred.iter().chain(labels).find(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite value {bad} in evaluation input")));
    }
    let n = pred.len() as f64;
    let threshold = VIOLATION_FRACTION * vdd_mv;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut maxe: f64 = 0.0;
    let mut violations = 0;
    for (p, y) in pred.iter().zip(labels) {
        let e = (p - y).abs();
        abs_sum += e;
        sq_sum += e * e;
        maxe = maxe.max(e);
        if e > threshold {
            violations += 1;
        }
    }
    let rmse = (sq_sum / n).sqrt();
    let max_label = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_label = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_label = labels.iter().sum::<f64>() / n;
    let range = max_label - min_label;
    let (nrmse_pct, nrmse_basis) = if range > 0.0 {
        (100.0 * rmse / range, NrmseBasis::Range)
    } else {
        let d = if mean_label != 0.0 { mean_label.abs() } else { 1.0 };
        (100.0 * rmse / d, NrmseBasis::Mean)
    };
    Ok(EvalReport {
        n: pred.len(),
        mae_mv: abs_sum / n,
        maxe_mv: maxe,
        rmse_mv: rmse,
        nrmse_pct,
        nrmse_basis,
        mean_pred_mv: pred.iter().sum::<f64>() / n,
        max_pred_mv: pred.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_label_mv: mean_label,
        max_label_mv: max_label,
        violation_threshold_mv: threshold,
        n_violations: violations,
        train_seconds: None,
        predict_seconds: None,
    })
}

impl EvalReport {
    /// Aligned `name value` lines.
    pub fn to_text(&self) -> String {
        let basis = match self.nrmse_basis {
            NrmseBasis::Range => "RMSE / label range",
            NrmseBasis::Mean => "RMSE / |label mean|",
        };
        let mut rows: Vec<(&str, String)> = vec![
            ("samples", self.n.to_string()),
            ("MAE (mV)", format!("{:.4}", self.mae_mv)),
            ("MaxE (mV)", format!("{:.4}", self.maxe_mv)),
            ("RMSE (mV)", format!("{:.4}", self.rmse_mv)),
            ("NRMSE (%)", format!("{:.4}  [{basis}]", self.nrmse_pct)),
            ("mean pred (mV)", format!("{:.4}", self.mean_pred_mv)),
            ("max pred (mV)", format!("{:.4}", self.max_pred_mv)),
            ("mean label (mV)", format!("{:.4}", self.mean_label_mv)),
            ("max label (mV)", format!("{:.4}", self.max_label_mv)),
            (
                "violations",
                format!("{} (|error| > {:.4} mV)", self.n_violations, self.violation_threshold_mv),
            ),
        ];
        if let Some(s) = self.train_seconds {
            rows.push(("train time (s)", format!("{s:.3}")));
        }
        if let Some(s) = self.predict_seconds {
            rows.push(("predict time (s)", format!("{s:.3}")));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}
