//! Two-stage feature normalization: `ln(1 + x)` then per-column min-max
//! scaling to `[0, 1]`, fitted on training rows only.

use serde::{Deserialize, Serialize};

use crate::data::FeatureSetId;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Element-wise `ln(1 + x)`. Negative entries are rejected.
pub fn log_transform(m: &Matrix) -> Result<Matrix> {
    let cols = m.cols();
    let mut out = Vec::with_capacity(m.data().len());
    for (k, &v) in m.data().iter().enumerate() {
        if !(v >= 0.0) {
            return Err(Error::validation(format!(
                "log transform needs non-negative input; row {} column {} is {v}",
                k / cols.max(1),
                k % cols.max(1)
            )));
        }
        out.push(v.ln_1p());
    }
    Matrix::from_vec(m.rows(), cols, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub columns: Vec<String>,
    /// Per-column minimum after the log transform.
    pub min: Vec<f64>,
    /// Per-column maximum after the log transform.
    pub max: Vec<f64>,
    /// Spans at or below this are treated as constant columns.
    pub epsilon: f64,
}

impl ScalerParams {
    pub fn width(&self) -> usize {
        self.min.len()
    }

    pub fn matches(&self, set_id: FeatureSetId) -> bool {
        self.columns.iter().map(String::as_str).eq(set_id.columns().iter().copied())
    }
}

/// Fit min/max of an already log-transformed training matrix.
pub fn fit_scaler(train: &Matrix, columns: &[&str]) -> Result<ScalerParams> {
    if columns.len() != train.cols() {
        return Err(Error::shape(
            "fit_scaler",
            format!("{} column names for {} columns", columns.len(), train.cols()),
        ));
    }
    if train.rows() == 0 {
        return Err(Error::validation("cannot fit a scaler on zero rows"));
    }
    let mut min = vec![f64::INFINITY; train.cols()];
    let mut max = vec![f64::NEG_INFINITY; train.cols()];
    for r in 0..train.rows() {
        for (c, &v) in train.row(r).iter().enumerate() {
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
    }
    Ok(ScalerParams {
        columns: columns.iter().map(|s| s.to_string()).collect(),
        min,
        max,
        epsilon: 0.0,
    })
}

/// `(x − min)/(max − min)`, clipped to `[0, 1]`; constant columns map to 0.
pub fn apply_scaler(m: &Matrix, params: &ScalerParams) -> Result<Matrix> {
    if m.cols() != params.width() {
        return Err(Error::shape(
            "apply_scaler",
            format!("matrix has {} columns, scaler has {}", m.cols(), params.width()),
        ));
    }
    let mut out = m.clone();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let span = params.max[c] - params.min[c];
            let v = if span > params.epsilon {
                ((m.get(r, c) - params.min[c]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Log transform, fit on `train_rows`, apply to every row.
pub fn fit_transform(
    raw: &Matrix,
    columns: &[&str],
    train_rows: &[usize],
) -> Result<(Matrix, ScalerParams)> {
    let logged = log_transform(raw)?;
    let params = fit_scaler(&logged.select_rows(train_rows), columns)?;
    let scaled = apply_scaler(&logged, &params)?;
    Ok((scaled, params))
}

/// Log transform then apply previously fitted params.
pub fn transform(raw: &Matrix, params: &ScalerParams) -> Result<Matrix> {
    apply_scaler(&log_transform(raw)?, params)
}
