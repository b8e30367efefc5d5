use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
}

impl LinearModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

pub(crate) fn check_xy(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(validation!("no training rows"));
    }
    if x.len() != y.len() {
        return Err(validation!("{} rows but {} targets", x.len(), y.len()));
    }
    let m = x[0].len();
    if x.iter().any(|r| r.len() != m) {
        return Err(validation!("ragged feature matrix"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(validation!("non-finite training value"));
    }
    Ok(m)
}

/// Least squares with intercept, solved by QR after a rank check.
pub fn fit_ols(x: &[Vec<f64>], y: &[f64]) -> Result<LinearModel> {
    let m = check_xy(x, y)?;
    let n = x.len();
    if n <= m {
        return Err(Error::Singular(format!(
            "least squares needs more rows than predictors ({n} rows, {m} predictors)"
        )));
    }
    let a = DMatrix::from_fn(n, m + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let s = a.clone().singular_values();
    let smax = s.max();
    let smin = s.min();
    if !(smin > smax * (n as f64) * f64::EPSILON * 16.0) {
        return Err(Error::Singular(format!(
            "design matrix is rank deficient (singular values {smax:e} .. {smin:e})"
        )));
    }
    let b = DVector::from_column_slice(y);
    let qr = a.qr();
    let qtb = qr.q().transpose() * b;
    let w = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    Ok(LinearModel {
        intercept: w[0],
        weights: w.iter().skip(1).copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetFit {
    pub model: LinearModel,
    pub converged: bool,
    pub sweeps: usize,
}

pub const EN_TOL: f64 = 1e-7;
pub const EN_MAX_SWEEPS: usize = 10_000;

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on
/// (1/2N)‖y − b − Xw‖² + αρ‖w‖₁ + α(1−ρ)/2 ‖w‖², intercept unpenalized.
pub fn fit_elasticnet(x: &[Vec<f64>], y: &[f64], alpha: f64, rho: f64) -> Result<ElasticNetFit> {
    let m = check_xy(x, y)?;
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(validation!(
            "alpha must be finite and non-negative, got {alpha}"
        ));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(validation!("rho must lie in [0, 1], got {rho}"));
    }
    let n = x.len();
    let nf = n as f64;
    // Centering absorbs the unpenalized intercept.
    let xm: Vec<f64> = (0..m)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();
    let ym = y.iter().sum::<f64>() / nf;
    let cols: Vec<Vec<f64>> = (0..m)
        .map(|j| x.iter().map(|r| r[j] - xm[j]).collect())
        .collect();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf)
        .collect();
    let l1 = alpha * rho;
    let l2 = alpha * (1.0 - rho);
    let mut w = vec![0.0; m];
    let mut r: Vec<f64> = y.iter().map(|v| v - ym).collect();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < EN_MAX_SWEEPS {
        sweeps += 1;
        let mut max_step: f64 = 0.0;
        for j in 0..m {
            let denom = norms[j] + l2;
            if denom == 0.0 {
                continue;
            }
            let c = &cols[j];
            let old = w[j];
            let g = c.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / nf + norms[j] * old;
            let new = soft_threshold(g, l1) / denom;
            let step = new - old;
            if step != 0.0 {
                for (ri, ci) in r.iter_mut().zip(c) {
                    *ri -= step * ci;
                }
                w[j] = new;
                max_step = max_step.max(step.abs());
            }
        }
        if max_step < EN_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("elastic net stopped at the {EN_MAX_SWEEPS}-sweep cap without converging");
    }
    let intercept = ym - xm.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    Ok(ElasticNetFit {
        model: LinearModel {
            intercept,
            weights: w,
        },
        converged,
        sweeps,
    })
}

/// Elastic-net objective value at a given model.
pub fn elasticnet_objective(
    x: &[Vec<f64>],
    y: &[f64],
    m: &LinearModel,
    alpha: f64,
    rho: f64,
) -> f64 {
    let n = x.len() as f64;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(r, t)| {
            let e = t - m.predict_row(r);
            e * e
        })
        .sum();
    let l1: f64 = m.weights.iter().map(|w| w.abs()).sum();
    let l2: f64 = m.weights.iter().map(|w| w * w).sum();
    sse / (2.0 * n) + alpha * rho * l1 + 0.5 * alpha * (1.0 - rho) * l2
}

/// Largest violation of the elastic-net optimality conditions: the smooth
/// gradient must equal −αρ·sign(w) for nonzero w and lie within ±αρ at zero.
pub fn elasticnet_kkt_violation(
    x: &[Vec<f64>],
    y: &[f64],
    m: &LinearModel,
    alpha: f64,
    rho: f64,
) -> f64 {
    let n = x.len() as f64;
    let resid: Vec<f64> = x.iter().zip(y).map(|(r, t)| t - m.predict_row(r)).collect();
    let l1 = alpha * rho;
    let l2 = alpha * (1.0 - rho);
    let mut worst = resid.iter().sum::<f64>().abs() / n;
    for (j, &w) in m.weights.iter().enumerate() {
        let g = -x.iter().zip(&resid).map(|(r, e)| r[j] * e).sum::<f64>() / n + l2 * w;
        let v = if w != 0.0 {
            (g + l1 * w.signum()).abs()
        } else {
            (g.abs() - l1).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}
