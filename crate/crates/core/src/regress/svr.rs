//! ε-insensitive support vector regression with an RBF kernel, solved in
//! the dual by SMO with second-order working-set selection.

use log::warn;
use serde::{Deserialize, Serialize};

use super::linear::check_xy;
use crate::error::{validation, Result};

const TAU: f64 = 1e-12;
pub const SVR_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// 1 / (m · Var(all entries of X)).
    Scale,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub gamma: f64,
    pub support: Vec<Vec<f64>>,
    /// α − α* per support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
}

impl SvrModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.bias
            + self
                .support
                .iter()
                .zip(&self.coef)
                .map(|(s, c)| c * rbf(self.gamma, s, x))
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrFit {
    pub model: SvrModel,
    /// Full dual solution: α for rows 0..N, then α* for rows 0..N.
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
    (-gamma * d2).exp()
}

pub fn scale_gamma(x: &[Vec<f64>]) -> f64 {
    let m = x.first().map_or(0, Vec::len);
    let all: Vec<f64> = x.iter().flatten().copied().collect();
    if all.is_empty() || m == 0 {
        return 1.0;
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (m as f64 * var)
    } else {
        1.0
    }
}

pub fn fit_svr(
    x: &[Vec<f64>],
    y: &[f64],
    c: f64,
    epsilon: f64,
    gamma: GammaMode,
) -> Result<SvrFit> {
    check_xy(x, y)?;
    if !(c > 0.0) || !c.is_finite() {
        return Err(validation!("SVR C must be positive, got {c}"));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(validation!(
            "SVR epsilon must be non-negative, got {epsilon}"
        ));
    }
    let gamma = match gamma {
        GammaMode::Scale => scale_gamma(x),
        GammaMode::Value(g) if g > 0.0 && g.is_finite() => g,
        GammaMode::Value(g) => return Err(validation!("SVR gamma must be positive, got {g}")),
    };
    let n = x.len();
    let l = 2 * n;
    let sign: Vec<f64> = (0..l).map(|t| if t < n { 1.0 } else { -1.0 }).collect();
    // Q_ij = s_i s_j K_ij, stored densely.
    let mut q = vec![0.0; l * l];
    for i in 0..n {
        for j in i..n {
            let v = rbf(gamma, &x[i], &x[j]);
            for (a, b) in [(i, j), (i, j + n), (i + n, j), (i + n, j + n)] {
                let qv = sign[a] * sign[b] * v;
                q[a * l + b] = qv;
                q[b * l + a] = qv;
            }
        }
    }
    let mut a = vec![0.0; l];
    let mut g: Vec<f64> = (0..l)
        .map(|t| {
            if t < n {
                epsilon - y[t]
            } else {
                epsilon + y[t - n]
            }
        })
        .collect();
    let max_iter = 10_000_000usize.max(100 * l);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        // Maximal-violating first index, second-order second index.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..l {
            let v = if sign[t] > 0.0 {
                if a[t] < c {
                    -g[t]
                } else {
                    continue;
                }
            } else if a[t] > 0.0 {
                g[t]
            } else {
                continue;
            };
            if v >= gmax {
                gmax = v;
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else {
            converged = true;
            break;
        };
        let qi = &q[i * l..(i + 1) * l];
        let qii = qi[i];
        let mut gmax2 = f64::NEG_INFINITY;
        let mut best = f64::INFINITY;
        let mut j_sel = None;
        for t in 0..l {
            let (grad_diff, cand) = if sign[t] > 0.0 {
                if a[t] > 0.0 {
                    (gmax + g[t], g[t])
                } else {
                    continue;
                }
            } else if a[t] < c {
                (gmax - g[t], -g[t])
            } else {
                continue;
            };
            gmax2 = gmax2.max(cand);
            if grad_diff > 0.0 {
                let quad = qii + q[t * l + t] - 2.0 * sign[i] * sign[t] * qi[t];
                let obj = -(grad_diff * grad_diff) / quad.max(TAU);
                if obj <= best {
                    best = obj;
                    j_sel = Some(t);
                }
            }
        }
        if gmax + gmax2 < SVR_TOL {
            converged = true;
            break;
        }
        let Some(j) = j_sel else {
            converged = true;
            break;
        };
        iterations += 1;

        let (old_i, old_j) = (a[i], a[j]);
        let qij = qi[j];
        let qjj = q[j * l + j];
        if sign[i] != sign[j] {
            let quad = (qii + qjj + 2.0 * qij).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = a[i] - a[j];
            a[i] += delta;
            a[j] += delta;
            if diff > 0.0 {
                if a[j] < 0.0 {
                    a[j] = 0.0;
                    a[i] = diff;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = -diff;
            }
            if diff > 0.0 {
                if a[i] > c {
                    a[i] = c;
                    a[j] = c - diff;
                }
            } else if a[j] > c {
                a[j] = c;
                a[i] = c + diff;
            }
        } else {
            let quad = (qii + qjj - 2.0 * qij).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = a[i] + a[j];
            a[i] -= delta;
            a[j] += delta;
            if sum > c {
                if a[i] > c {
                    a[i] = c;
                    a[j] = sum - c;
                }
            } else if a[j] < 0.0 {
                a[j] = 0.0;
                a[i] = sum;
            }
            if sum > c {
                if a[j] > c {
                    a[j] = c;
                    a[i] = sum - c;
                }
            } else if a[i] < 0.0 {
                a[i] = 0.0;
                a[j] = sum;
            }
        }
        let (di, dj) = (a[i] - old_i, a[j] - old_j);
        let qj = &q[j * l..(j + 1) * l];
        for t in 0..l {
            g[t] += qi[t] * di + qj[t] * dj;
        }
    }
    if !converged {
        warn!("SVR dual solver hit the iteration cap");
    }

    // Bias from free variables, else the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut nfree, mut sum) = (0usize, 0.0);
    for t in 0..l {
        let yg = sign[t] * g[t];
        if a[t] >= c {
            if sign[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if a[t] <= 0.0 {
            if sign[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            nfree += 1;
            sum += yg;
        }
    }
    let rho = if nfree > 0 {
        sum / nfree as f64
    } else {
        0.5 * (ub + lb)
    };

    let mut support = Vec::new();
    let mut coef = Vec::new();
    for r in 0..n {
        let cr = a[r] - a[r + n];
        if cr != 0.0 {
            support.push(x[r].clone());
            coef.push(cr);
        }
    }
    Ok(SvrFit {
        model: SvrModel {
            gamma,
            support,
            coef,
            bias: -rho,
        },
        alpha: a,
        iterations,
        converged,
    })
}
