use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: f64,
    pub r2_adj: f64,
    pub mae: f64,
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(validation!(
            "{} targets but {} predictions",
            y.len(),
            yhat.len()
        ));
    }
    if y.len() < 2 {
        return Err(validation!(
            "metrics need at least 2 points, got {}",
            y.len()
        ));
    }
    Ok(())
}

pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if sst == 0.0 {
        return Err(Error::Undefined(
            "R² undefined for a constant target".into(),
        ));
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - sse / sst)
}

/// Adjusted R² for `m` predictors over `n` observations.
pub fn adjusted_r2(r2: f64, n: usize, m: usize) -> Result<f64> {
    if n <= m + 1 {
        return Err(Error::Undefined(format!(
            "adjusted R² undefined with {n} observations and {m} predictors"
        )));
    }
    Ok(1.0 - (1.0 - r2) * (n - 1) as f64 / (n - m - 1) as f64)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn compute_metrics(y: &[f64], yhat: &[f64], m: usize) -> Result<Metrics> {
    let r2 = r2(y, yhat)?;
    Ok(Metrics {
        r2,
        r2_adj: adjusted_r2(r2, y.len(), m)?,
        mae: mae(y, yhat)?,
    })
}

/// Mean and sample standard deviation of a set of scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjusted_example() {
        assert_eq!(adjusted_r2(0.5, 20, 3).unwrap(), 0.40625);
        assert!(matches!(adjusted_r2(0.5, 4, 3), Err(Error::Undefined(_))));
    }

    #[test]
    fn trivial_identities() {
        let y = [1.0, 2.0, 4.0, 7.0];
        let m = compute_metrics(&y, &y, 1).unwrap();
        assert_eq!((m.r2, m.mae), (1.0, 0.0));
        let mean = [3.5; 4];
        assert_eq!(r2(&y, &mean).unwrap(), 0.0);
        assert!(r2(&[2.0, 2.0], &[1.0, 3.0]).is_err());
        assert!(r2(&[2.0], &[1.0]).is_err());
    }

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 2f64.sqrt()));
        assert_eq!(Stat::of(&[5.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }
}
