use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Fitted log -> standardize -> min-max chain for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub log: bool,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ColumnScaler {
    pub fn fit(values: &[f64], log: bool, name: &str) -> Result<Self> {
        if values.is_empty() {
            return Err(validation!("column `{name}` has no training values"));
        }
        let logged = values
            .iter()
            .enumerate()
            .map(|(i, &v)| log_value(v, log, i, name))
            .collect::<Result<Vec<_>>>()?;
        let n = logged.len() as f64;
        let mean = logged.iter().sum::<f64>() / n;
        let std = (logged.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(validation!(
                "column `{name}` is constant on the training rows"
            ));
        }
        let z = logged.iter().map(|v| (v - mean) / std);
        let min = z.clone().fold(f64::INFINITY, f64::min);
        let max = z.fold(f64::NEG_INFINITY, f64::max);
        Ok(ColumnScaler {
            log,
            mean,
            std,
            min,
            max,
        })
    }

    /// The value after the optional log only.
    pub fn report_scale(&self, v: f64, row: usize, name: &str) -> Result<f64> {
        log_value(v, self.log, row, name)
    }

    pub fn forward(&self, v: f64, row: usize, name: &str) -> Result<f64> {
        Ok(self.from_report_scale(self.report_scale(v, row, name)?))
    }

    pub fn from_report_scale(&self, v: f64) -> f64 {
        ((v - self.mean) / self.std - self.min) / (self.max - self.min)
    }

    pub fn to_report_scale(&self, u: f64) -> f64 {
        (u * (self.max - self.min) + self.min) * self.std + self.mean
    }

    pub fn inverse(&self, u: f64) -> f64 {
        let v = self.to_report_scale(u);
        if self.log {
            v.exp()
        } else {
            v
        }
    }
}

fn log_value(v: f64, log: bool, row: usize, name: &str) -> Result<f64> {
    if !v.is_finite() {
        return Err(validation!("row {row}, column `{name}`: non-finite value"));
    }
    if !log {
        return Ok(v);
    }
    if v <= 0.0 {
        return Err(validation!(
            "row {row}, column `{name}`: value {v} is not positive and cannot be logged"
        ));
    }
    Ok(v.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub columns: Vec<String>,
    pub x: Vec<ColumnScaler>,
    pub target: String,
    pub y: ColumnScaler,
}

impl Preprocessor {
    /// Fits one scaler per feature column and one for the target. `log_x`
    /// flags feature columns for the natural-log step.
    pub fn fit(
        x: &[Vec<f64>],
        y: &[f64],
        columns: &[String],
        log_x: &[bool],
        target: &str,
        log_y: bool,
    ) -> Result<Self> {
        if x.len() != y.len() {
            return Err(validation!(
                "{} feature rows but {} targets",
                x.len(),
                y.len()
            ));
        }
        let m = columns.len();
        if log_x.len() != m || x.iter().any(|r| r.len() != m) {
            return Err(validation!("feature rows do not match {m} columns"));
        }
        let scalers = (0..m)
            .map(|j| {
                let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
                ColumnScaler::fit(&col, log_x[j], &columns[j])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Preprocessor {
            columns: columns.to_vec(),
            x: scalers,
            target: target.to_string(),
            y: ColumnScaler::fit(y, log_y, target)?,
        })
    }

    pub fn transform_x(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        x.iter()
            .enumerate()
            .map(|(i, row)| {
                if row.len() != self.x.len() {
                    return Err(validation!(
                        "row {i} has {} columns, expected {}",
                        row.len(),
                        self.x.len()
                    ));
                }
                row.iter()
                    .zip(&self.x)
                    .zip(&self.columns)
                    .map(|((&v, s), name)| s.forward(v, i, name))
                    .collect()
            })
            .collect()
    }

    pub fn transform_y(&self, y: &[f64]) -> Result<Vec<f64>> {
        y.iter()
            .enumerate()
            .map(|(i, &v)| self.y.forward(v, i, &self.target))
            .collect()
    }

    /// Targets on the scale metrics are reported on (after the log step).
    pub fn y_report_scale(&self, y: &[f64]) -> Result<Vec<f64>> {
        y.iter()
            .enumerate()
            .map(|(i, &v)| self.y.report_scale(v, i, &self.target))
            .collect()
    }

    pub fn y_to_report_scale(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&v| self.y.to_report_scale(v)).collect()
    }

    pub fn inverse_y(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&v| self.y.inverse(v)).collect()
    }
}
