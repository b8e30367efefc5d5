//! Point-of-interest association analysis: per-imagelet category scores,
//! tertile classes, logistic classifiers with cross-validated AUC, and the
//! logit linking predicted classes to PoI presence.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, validation, Result};
use crate::eval::Stat;
use crate::geo::{BBox, Point};
use crate::geojson::Feature;
use crate::raster::ImageletId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoiCategory {
    Sustenance,
    Transportation,
    Entertainment,
}

impl PoiCategory {
    pub const ALL: [PoiCategory; 3] = [
        PoiCategory::Sustenance,
        PoiCategory::Transportation,
        PoiCategory::Entertainment,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PoiCategory::Sustenance => "sustenance",
            PoiCategory::Transportation => "transportation",
            PoiCategory::Entertainment => "entertainment",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for PoiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoiCategory {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        PoiCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format_err!("unknown PoI category `{s}`"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoiLayer {
    pub points: Vec<(Point, PoiCategory)>,
}

pub fn poi_layer_from_features(features: &[Feature]) -> Result<PoiLayer> {
    let points = features
        .iter()
        .map(|f| Ok((f.point()?, f.str_prop("category")?.parse()?)))
        .collect::<Result<_>>()?;
    Ok(PoiLayer { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiScores {
    pub imagelet_id: ImageletId,
    pub counts: [u64; 3],
    /// ln(1 + count) per category.
    pub raw: [f64; 3],
    /// `raw` min-max normalized over the imagelet set.
    pub normalized: [f64; 3],
}

impl PoiScores {
    pub fn score(&self, c: PoiCategory) -> f64 {
        self.normalized[c.index()]
    }
}

/// Counts PoIs inside each imagelet (boundary-inclusive) and normalizes
/// ln(1+n) per category. A category constant over the set normalizes to 0.
pub fn poi_scores(ims: &[(ImageletId, BBox)], pois: &PoiLayer) -> Vec<PoiScores> {
    let mut out: Vec<PoiScores> = ims
        .iter()
        .map(|(id, b)| {
            let mut counts = [0u64; 3];
            for (p, c) in &pois.points {
                if b.contains(*p) {
                    counts[c.index()] += 1;
                }
            }
            PoiScores {
                imagelet_id: id.clone(),
                counts,
                raw: counts.map(|n| (n as f64).ln_1p()),
                normalized: [0.0; 3],
            }
        })
        .collect();
    normalize_scores(&mut out);
    out
}

/// Min-max normalizes `raw` per category over the given set.
pub fn normalize_scores(scores: &mut [PoiScores]) {
    for c in 0..3 {
        let lo = scores
            .iter()
            .map(|s| s.raw[c])
            .fold(f64::INFINITY, f64::min);
        let hi = scores
            .iter()
            .map(|s| s.raw[c])
            .fold(f64::NEG_INFINITY, f64::max);
        for s in scores.iter_mut() {
            s.normalized[c] = if hi > lo {
                (s.raw[c] - lo) / (hi - lo)
            } else {
                0.0
            };
        }
    }
}

pub fn poi_scores_to_csv(scores: &[PoiScores], classes: &[Option<bool>]) -> String {
    let mut out = String::from(
        "imagelet_id,n_sustenance,n_transportation,n_entertainment,s_sustenance,s_transportation,s_entertainment,predicted_class\n",
    );
    for (i, s) in scores.iter().enumerate() {
        let class = match classes.get(i).copied().flatten() {
            Some(true) => "high",
            Some(false) => "low",
            None => "",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.imagelet_id,
            s.counts[0],
            s.counts[1],
            s.counts[2],
            s.normalized[0],
            s.normalized[1],
            s.normalized[2],
            class
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tertiles {
    pub variable: String,
    pub lower: f64,
    pub upper: f64,
    /// Per input value; `None` for the excluded middle third.
    pub labels: Vec<Option<Class>>,
}

impl Tertiles {
    pub fn count(&self, c: Class) -> usize {
        self.labels.iter().filter(|l| **l == Some(c)).count()
    }
}

/// High/low classes from the 1/3 and 2/3 linear-interpolation quantiles.
pub fn tertile_labels(values: &[f64], variable: &str) -> Result<Tertiles> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(validation!("`{variable}`: non-finite value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(validation!(
            "`{variable}` needs at least 3 distinct values for tertiles, got {}",
            distinct.len()
        ));
    }
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let (lower, upper) = (q(1.0 / 3.0), q(2.0 / 3.0));
    let labels = values
        .iter()
        .map(|&v| {
            if v >= upper {
                Some(Class::High)
            } else if v <= lower {
                Some(Class::Low)
            } else {
                None
            }
        })
        .collect();
    Ok(Tertiles {
        variable: variable.to_string(),
        lower,
        upper,
        labels,
    })
}

/// Mann–Whitney AUC with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(validation!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        ));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(validation!("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&t| labels[t]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub const LOGIT_TOL: f64 = 1e-8;
pub const LOGIT_CAP: f64 = 50.0;
const LOGIT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    /// Intercept first, then one coefficient per column.
    pub beta: Vec<f64>,
    /// Wald standard errors from the inverse observed information.
    pub se: Vec<f64>,
    pub p_values: Vec<f64>,
    pub converged: bool,
    /// Set when a coefficient hit the ±50 cap (separated data).
    pub capped: bool,
    pub iterations: usize,
}

impl LogitFit {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.beta[0]
            + self.beta[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^t) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn eta(beta: &[f64], row: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(row).map(|(b, v)| b * v).sum::<f64>()
}

pub fn logit_loglik(beta: &[f64], x: &[Vec<f64>], y: &[bool]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(r, &t)| {
            let e = eta(beta, r);
            if t {
                -softplus(-e)
            } else {
                -softplus(e)
            }
        })
        .sum()
}

pub fn logit_gradient(beta: &[f64], x: &[Vec<f64>], y: &[bool]) -> Vec<f64> {
    let mut g = vec![0.0; beta.len()];
    for (r, &t) in x.iter().zip(y) {
        let e = f64::from(u8::from(t)) - sigmoid(eta(beta, r));
        g[0] += e;
        for (gj, v) in g[1..].iter_mut().zip(r) {
            *gj += e * v;
        }
    }
    g
}

fn information(beta: &[f64], x: &[Vec<f64>]) -> DMatrix<f64> {
    let k = beta.len();
    let mut h = DMatrix::zeros(k, k);
    for r in x {
        let p = sigmoid(eta(beta, r));
        let w = p * (1.0 - p);
        let z: Vec<f64> = std::iter::once(1.0).chain(r.iter().copied()).collect();
        for a in 0..k {
            for b in 0..k {
                h[(a, b)] += w * z[a] * z[b];
            }
        }
    }
    h
}

/// Maximum-likelihood logistic regression by damped Newton steps.
pub fn fit_logit(x: &[Vec<f64>], y: &[bool]) -> Result<LogitFit> {
    if x.is_empty() || x.len() != y.len() {
        return Err(validation!(
            "logit needs matching non-empty rows and labels"
        ));
    }
    let m = x[0].len();
    if x.iter()
        .any(|r| r.len() != m || r.iter().any(|v| !v.is_finite()))
    {
        return Err(validation!("logit rows must be finite and of equal width"));
    }
    if y.iter().all(|&t| t) || y.iter().all(|&t| !t) {
        return Err(validation!("logit needs both classes present"));
    }
    let mut beta = vec![0.0; m + 1];
    let mut ll = logit_loglik(&beta, x, y);
    let (mut converged, mut capped) = (false, false);
    let mut iterations = 0;
    while iterations < LOGIT_MAX_ITER {
        iterations += 1;
        let g = DVector::from_vec(logit_gradient(&beta, x, y));
        let h = information(&beta, x);
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => match h.try_inverse() {
                Some(inv) => inv * &g,
                None => g.clone(),
            },
        };
        // Halve until the likelihood does not decrease.
        let mut t = 1.0;
        let mut next: Vec<f64>;
        loop {
            next = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + t * s)
                .collect();
            let nl = logit_loglik(&next, x, y);
            if nl >= ll || t < 1e-10 {
                ll = nl;
                break;
            }
            t *= 0.5;
        }
        let change = beta
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        beta = next;
        if beta.iter().any(|b| b.abs() > LOGIT_CAP) {
            for b in &mut beta {
                *b = b.clamp(-LOGIT_CAP, LOGIT_CAP);
            }
            capped = true;
            warn!("logistic coefficients diverge (separated classes); capped at ±{LOGIT_CAP}");
            break;
        }
        if change < LOGIT_TOL {
            converged = true;
            break;
        }
    }
    let (se, p_values) = match information(&beta, x).try_inverse() {
        Some(inv) => (0..=m)
            .map(|j| {
                let s = inv[(j, j)].max(0.0).sqrt();
                let z = beta[j] / s;
                (
                    s,
                    if s > 0.0 {
                        libm::erfc(z.abs() / std::f64::consts::SQRT_2)
                    } else {
                        1.0
                    },
                )
            })
            .unzip(),
        None => (vec![f64::INFINITY; m + 1], vec![1.0; m + 1]),
    };
    Ok(LogitFit {
        beta,
        se,
        p_values,
        converged,
        capped,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub variable: String,
    pub auc: Option<Stat>,
    pub fold_aucs: Vec<f64>,
}

/// Positives and negatives shuffled separately and dealt round-robin.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Column standardization fitted on training rows; constant columns pass
/// through centered.
pub(crate) struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub(crate) fn fit(x: &[Vec<f64>]) -> Self {
        let m = x.first().map_or(0, Vec::len);
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..m)
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let std = (0..m)
            .map(|j| {
                let s = (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub(crate) fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Logistic classifier on feature vectors, scored by stratified k-fold AUC.
pub fn fit_binary_classifier(
    variable: &str,
    x: &[Vec<f64>],
    labels: &[bool],
    k: usize,
    seed: u64,
) -> Result<ClassifierReport> {
    if x.len() != labels.len() {
        return Err(validation!("{} rows but {} labels", x.len(), labels.len()));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(validation!("`{variable}`: classifier needs both classes"));
    }
    if k < 2 || k > labels.len() {
        return Err(validation!(
            "`{variable}`: cannot split {} rows into {k} folds",
            labels.len()
        ));
    }
    let folds = stratified_folds(labels, k, seed);
    let mut fold_aucs = Vec::new();
    for test in &folds {
        let mut is_test = vec![false; x.len()];
        for &i in test {
            is_test[i] = true;
        }
        let train: Vec<usize> = (0..x.len()).filter(|&i| !is_test[i]).collect();
        let xt: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let yt: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let z = Standardizer::fit(&xt);
        let xs: Vec<Vec<f64>> = xt.iter().map(|r| z.apply(r)).collect();
        let fit = match fit_logit(&xs, &yt) {
            Ok(f) => f,
            Err(e) => {
                warn!("`{variable}`: fold skipped: {e}");
                continue;
            }
        };
        let scores: Vec<f64> = test
            .iter()
            .map(|&i| fit.linear_predictor(&z.apply(&x[i])))
            .collect();
        let truth: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        match auc(&scores, &truth) {
            Ok(a) => fold_aucs.push(a),
            Err(e) => warn!("`{variable}`: fold skipped: {e}"),
        }
    }
    Ok(ClassifierReport {
        variable: variable.to_string(),
        auc: Stat::of(&fold_aucs),
        fold_aucs,
    })
}

/// Held-out class predictions: a seeded stratified half trains the
/// classifier, which then labels the other half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPredictions {
    pub test: Vec<usize>,
    pub predicted: Vec<bool>,
}

pub fn holdout_predictions(
    variable: &str,
    x: &[Vec<f64>],
    labels: &[bool],
    seed: u64,
) -> Result<HoldoutPredictions> {
    if x.len() != labels.len() {
        return Err(validation!("{} rows but {} labels", x.len(), labels.len()));
    }
    let halves = stratified_folds(labels, 2, seed);
    let (train, test) = (&halves[0], &halves[1]);
    let xt: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
    let yt: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
    if yt.iter().all(|&l| l) || yt.iter().all(|&l| !l) {
        return Err(validation!(
            "`{variable}`: training half needs both classes"
        ));
    }
    let z = Standardizer::fit(&xt);
    let xs: Vec<Vec<f64>> = xt.iter().map(|r| z.apply(r)).collect();
    let fit = fit_logit(&xs, &yt)?;
    let predicted = test
        .iter()
        .map(|&i| fit.linear_predictor(&z.apply(&x[i])) >= 0.0)
        .collect();
    Ok(HoldoutPredictions {
        test: test.clone(),
        predicted,
    })
}

/// Predictor order of the PoI logit.
pub const LOGIT_PREDICTORS: [PoiCategory; 3] = [
    PoiCategory::Entertainment,
    PoiCategory::Sustenance,
    PoiCategory::Transportation,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitCoefficient {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    pub variable: String,
    pub intercept: f64,
    pub coefficients: Vec<LogitCoefficient>,
    pub n: usize,
    pub converged: bool,
    pub separated: bool,
}

/// Logit of the predicted class on the normalized PoI scores.
pub fn fit_poi_logit(variable: &str, classes: &[bool], scores: &[PoiScores]) -> Result<LogitModel> {
    if classes.len() != scores.len() {
        return Err(validation!(
            "{} classes but {} score rows",
            classes.len(),
            scores.len()
        ));
    }
    let x: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| LOGIT_PREDICTORS.iter().map(|&c| s.score(c)).collect())
        .collect();
    let fit = fit_logit(&x, classes)?;
    let coefficients = LOGIT_PREDICTORS
        .iter()
        .enumerate()
        .map(|(j, c)| LogitCoefficient {
            name: c.as_str().to_string(),
            beta: fit.beta[j + 1],
            se: fit.se[j + 1],
            p_value: fit.p_values[j + 1],
            significant: fit.p_values[j + 1] < 0.05,
        })
        .collect();
    Ok(LogitModel {
        variable: variable.to_string(),
        intercept: fit.beta[0],
        coefficients,
        n: classes.len(),
        converged: fit.converged,
        separated: fit.capped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub name: String,
    pub beta: f64,
    /// Upper bound on the change in Pr(high), in percentage points per unit.
    pub percent: f64,
    pub significant: bool,
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = format!("{:+.4}", self.percent);
        let s = s.trim_end_matches('0').trim_end_matches('.');
        write!(
            f,
            "{}: {s}%{}",
            self.name,
            if self.significant { " *" } else { "" }
        )
    }
}

pub fn divide_by_four(model: &LogitModel) -> Vec<Effect> {
    model
        .coefficients
        .iter()
        .map(|c| Effect {
            name: c.name.clone(),
            beta: c.beta,
            percent: c.beta / 4.0 * 100.0,
            significant: c.significant,
        })
        .collect()
}
