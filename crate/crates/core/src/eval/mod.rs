//! Cross-validation harnesses, the two-stage proxy model and residual output.
//!
//! Every score is computed on the report scale: the target after its
//! optional log step, before standardization.

pub mod metrics;
pub mod residuals;

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, validation, Result};
use crate::regress::{ModelArtifact, RegressorSpec};

pub use metrics::{adjusted_r2, compute_metrics, mae, r2, Metrics, Stat};
pub use residuals::{residual_features, residuals_to_csv, round_sig10};

/// District-level training data: one row per district.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub district_ids: Vec<String>,
    pub cities: Vec<String>,
    pub columns: Vec<String>,
    pub log_x: Vec<bool>,
    pub x: Vec<Vec<f64>>,
    pub target: String,
    pub log_y: bool,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.x.len() != n || self.district_ids.len() != n || self.cities.len() != n {
            return Err(validation!("dataset columns are not aligned"));
        }
        if self.log_x.len() != self.columns.len() {
            return Err(validation!(
                "log flags do not match {} columns",
                self.columns.len()
            ));
        }
        Ok(())
    }

    /// `district_id,city,<columns...>,<target>`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["district_id", "city"];
        header.extend(self.columns.iter().map(String::as_str));
        header.push(&self.target);
        w.write_record(&header).expect("in-memory write");
        for i in 0..self.len() {
            let mut rec = vec![self.district_ids[i].clone(), self.cities[i].clone()];
            rec.extend(self.x[i].iter().map(f64::to_string));
            rec.push(self.y[i].to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Inverse of [`Dataset::to_csv`]; the last column is the target and
    /// `is_log` marks log-scale variables.
    pub fn parse_csv(text: &str, is_log: impl Fn(&str) -> bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| format_err!("dataset header: {e}"))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.len() < 4 || header[0] != "district_id" || header[1] != "city" {
            return Err(format_err!(
                "dataset header must be `district_id,city,<columns>,<target>`"
            ));
        }
        let columns = header[2..header.len() - 1].to_vec();
        let target = header[header.len() - 1].clone();
        let mut d = Dataset {
            district_ids: Vec::new(),
            cities: Vec::new(),
            log_x: columns.iter().map(|c| is_log(c)).collect(),
            columns,
            x: Vec::new(),
            log_y: is_log(&target),
            target,
            y: Vec::new(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| format_err!("dataset row {}: {e}", i + 1))?;
            if rec.len() != header.len() {
                return Err(format_err!(
                    "dataset row {} has {} fields, expected {}",
                    i + 1,
                    rec.len(),
                    header.len()
                ));
            }
            let nums = rec
                .iter()
                .skip(2)
                .map(|s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| format_err!("dataset row {}: bad number `{s}`", i + 1))
                })
                .collect::<Result<Vec<_>>>()?;
            d.district_ids.push(rec[0].to_string());
            d.cities.push(rec[1].to_string());
            d.y.push(nums[nums.len() - 1]);
            d.x.push(nums[..nums.len() - 1].to_vec());
        }
        Ok(d)
    }

    fn rows(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            idx.iter().map(|&i| self.x[i].clone()).collect(),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }
}

/// Per-repeat shuffled partitions of 0..n into k folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
    /// `folds[r][f]` lists the test indices of fold f in repeat r.
    pub folds: Vec<Vec<Vec<usize>>>,
}

impl FoldPlan {
    pub fn new(n: usize, k: usize, repeats: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(validation!("k-fold needs k ≥ 2, got {k}"));
        }
        if n < k {
            return Err(validation!("{n} rows cannot fill {k} folds"));
        }
        if repeats == 0 {
            return Err(validation!("repeats must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let folds = (0..repeats)
            .map(|_| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                // The first n mod k folds take one extra row.
                let (base, extra) = (n / k, n % k);
                let mut start = 0;
                (0..k)
                    .map(|f| {
                        let len = base + usize::from(f < extra);
                        let fold = order[start..start + len].to_vec();
                        start += len;
                        fold
                    })
                    .collect()
            })
            .collect();
        Ok(FoldPlan {
            k,
            repeats,
            seed,
            folds,
        })
    }

    pub fn n(&self) -> usize {
        self.folds
            .first()
            .map_or(0, |r| r.iter().map(Vec::len).sum())
    }

    /// Training indices complementary to one test fold, ascending.
    pub fn train(&self, repeat: usize, fold: usize) -> Vec<usize> {
        let mut in_test = vec![false; self.n()];
        for &i in &self.folds[repeat][fold] {
            in_test[i] = true;
        }
        (0..in_test.len()).filter(|&i| !in_test[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub r2: f64,
    /// Absent when the test fold has too few rows for the predictor count.
    pub r2_adj: Option<f64>,
    pub mae: f64,
}

impl FoldMetrics {
    pub fn compute(y: &[f64], yhat: &[f64], m: usize) -> Result<Self> {
        let r2 = r2(y, yhat)?;
        Ok(FoldMetrics {
            r2,
            r2_adj: adjusted_r2(r2, y.len(), m).ok(),
            mae: mae(y, yhat)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub repeat: usize,
    pub fold: usize,
    /// Test-set label for leave-one-city-out runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
    pub test: Vec<usize>,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
    pub metrics: Option<FoldMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistrictPrediction {
    pub district_id: String,
    pub city: String,
    #[serde(rename = "true")]
    pub truth: f64,
    /// Mean over the repeats in which the district was scored.
    pub predicted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub family: String,
    pub target: String,
    pub predictors: usize,
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
    pub r2: Option<Stat>,
    pub r2_adj: Option<Stat>,
    pub mae: Option<Stat>,
    /// Metrics of all out-of-fold predictions of a repeat, averaged over repeats.
    pub pooled_r2: Option<Stat>,
    pub pooled_r2_adj: Option<Stat>,
    pub pooled_mae: Option<Stat>,
    pub failed_folds: usize,
    pub folds: Vec<FoldRecord>,
    pub districts: Vec<DistrictPrediction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coefficients: Vec<Coefficient>,
}

impl EvalReport {
    fn assemble(
        family: &str,
        data: &Dataset,
        predictors: usize,
        plan: (usize, usize, u64),
        folds: Vec<FoldRecord>,
        truth: &[f64],
    ) -> Self {
        let ok: Vec<&FoldMetrics> = folds.iter().filter_map(|f| f.metrics.as_ref()).collect();
        let failed_folds = folds.iter().filter(|f| f.error.is_some()).count();
        let r2s: Vec<f64> = ok.iter().map(|m| m.r2).collect();
        let adjs: Vec<f64> = ok.iter().filter_map(|m| m.r2_adj).collect();
        let maes: Vec<f64> = ok.iter().map(|m| m.mae).collect();

        let mut pooled = (Vec::new(), Vec::new(), Vec::new());
        for r in 0..plan.1 {
            let (mut y, mut p) = (Vec::new(), Vec::new());
            for f in folds.iter().filter(|f| f.repeat == r && f.error.is_none()) {
                y.extend(&f.truth);
                p.extend(&f.predicted);
            }
            if let Ok(m) = FoldMetrics::compute(&y, &p, predictors) {
                pooled.0.push(m.r2);
                pooled.1.extend(m.r2_adj);
                pooled.2.push(m.mae);
            }
        }

        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for f in folds.iter().filter(|f| f.error.is_none()) {
            for (&i, &p) in f.test.iter().zip(&f.predicted) {
                let e = sums.entry(i).or_insert((0.0, 0));
                e.0 += p;
                e.1 += 1;
            }
        }
        let districts = sums
            .into_iter()
            .map(|(i, (s, c))| {
                let predicted = s / c as f64;
                DistrictPrediction {
                    district_id: data.district_ids[i].clone(),
                    city: data.cities[i].clone(),
                    truth: truth[i],
                    predicted,
                    residual: truth[i] - predicted,
                }
            })
            .collect();

        EvalReport {
            family: family.to_string(),
            target: data.target.clone(),
            predictors,
            k: plan.0,
            repeats: plan.1,
            seed: plan.2,
            r2: Stat::of(&r2s),
            r2_adj: Stat::of(&adjs),
            mae: Stat::of(&maes),
            pooled_r2: Stat::of(&pooled.0),
            pooled_r2_adj: Stat::of(&pooled.1),
            pooled_mae: Stat::of(&pooled.2),
            failed_folds,
            folds,
            districts,
            coefficients: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport =
            serde_json::from_str(text).map_err(|e| format_err!("report JSON: {e}"))?;
        for f in &r.folds {
            if f.test.len() != f.truth.len() || f.test.len() != f.predicted.len() {
                return Err(format_err!(
                    "report JSON: fold {}/{} arrays differ in length",
                    f.repeat,
                    f.fold
                ));
            }
        }
        Ok(r)
    }
}

/// Fits preprocessing and model on the given training rows only.
pub fn fit_fold(
    spec: &RegressorSpec,
    seed: u64,
    data: &Dataset,
    train: &[usize],
) -> Result<ModelArtifact> {
    let (x, y) = data.rows(train);
    ModelArtifact::fit(
        spec,
        seed,
        &x,
        &y,
        &data.columns,
        &data.log_x,
        &data.target,
        data.log_y,
    )
}

fn report_scale_truth(data: &Dataset) -> Result<Vec<f64>> {
    data.y
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !data.log_y {
                Ok(v)
            } else if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(validation!(
                    "row {i}: column `{}` must be positive for the log transform, got {v}",
                    data.target
                ))
            }
        })
        .collect()
}

/// Maps `f` over `items` on scoped threads, keeping input order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn score_fold(
    repeat: usize,
    fold: usize,
    test: &[usize],
    truth: &[f64],
    predictors: usize,
    predicted: Result<Vec<f64>>,
) -> FoldRecord {
    let t: Vec<f64> = test.iter().map(|&i| truth[i]).collect();
    let mut rec = FoldRecord {
        repeat,
        fold,
        city: None,
        test: test.to_vec(),
        truth: t,
        predicted: Vec::new(),
        metrics: None,
        error: None,
    };
    match predicted.and_then(|p| FoldMetrics::compute(&rec.truth, &p, predictors).map(|m| (p, m))) {
        Ok((p, m)) => {
            rec.predicted = p;
            rec.metrics = Some(m);
        }
        Err(e) => {
            warn!("fold {fold} of repeat {repeat} failed: {e}");
            rec.error = Some(e.to_string());
        }
    }
    rec
}

pub fn repeated_kfold(spec: &RegressorSpec, data: &Dataset, plan: &FoldPlan) -> Result<EvalReport> {
    data.validate()?;
    if plan.n() != data.len() {
        return Err(validation!(
            "fold plan covers {} rows, dataset has {}",
            plan.n(),
            data.len()
        ));
    }
    let truth = report_scale_truth(data)?;
    let m = data.columns.len();
    let jobs: Vec<(usize, usize)> = (0..plan.repeats)
        .flat_map(|r| (0..plan.k).map(move |f| (r, f)))
        .collect();
    let folds = par_map(&jobs, |&(r, f)| {
        let test = &plan.folds[r][f];
        let predicted = fit_fold(spec, plan.seed, data, &plan.train(r, f)).and_then(|a| {
            let (x, _) = data.rows(test);
            a.predict_report_scale(&x)
        });
        score_fold(r, f, test, &truth, m, predicted)
    });
    Ok(EvalReport::assemble(
        spec.family(),
        data,
        m,
        (plan.k, plan.repeats, plan.seed),
        folds,
        &truth,
    ))
}

/// Leave-one-city-out: one report per held-out city.
pub fn leave_one_city_out(
    spec: &RegressorSpec,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<(String, EvalReport)>> {
    data.validate()?;
    let mut by_city: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in data.cities.iter().enumerate() {
        by_city.entry(c).or_default().push(i);
    }
    if by_city.len() < 2 {
        return Err(validation!(
            "leave-one-city-out needs at least 2 cities, got {}",
            by_city.len()
        ));
    }
    let truth = report_scale_truth(data)?;
    let m = data.columns.len();
    let cities: Vec<(&str, Vec<usize>)> = by_city
        .into_iter()
        .filter(|(c, idx)| {
            if idx.len() < 2 {
                warn!("city `{c}` has {} district(s); skipped", idx.len());
            }
            idx.len() >= 2
        })
        .collect();
    Ok(par_map(&cities, |(city, test)| {
        let train: Vec<usize> = (0..data.len())
            .filter(|i| data.cities[*i] != *city)
            .collect();
        let predicted = fit_fold(spec, seed, data, &train).and_then(|a| {
            let (x, _) = data.rows(test);
            a.predict_report_scale(&x)
        });
        let mut rec = score_fold(0, 0, test, &truth, m, predicted);
        rec.city = Some(city.to_string());
        let report = EvalReport::assemble(spec.family(), data, m, (1, 1, seed), vec![rec], &truth);
        (city.to_string(), report)
    }))
}

/// Intermediate targets for the two-stage model, aligned with a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTargets {
    pub names: Vec<String>,
    pub log: Vec<bool>,
    /// One row per district, one column per proxy.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageSpec {
    pub stage1: RegressorSpec,
    pub stage2: RegressorSpec,
    /// Train stage 2 on true proxy values instead of stage-1 predictions.
    pub train_on_true_proxies: bool,
}

struct TwoStageFold {
    predicted: Vec<f64>,
    weights: Option<Vec<f64>>,
}

fn two_stage_fold(
    spec: &TwoStageSpec,
    seed: u64,
    data: &Dataset,
    proxies: &ProxyTargets,
    train: &[usize],
    test: &[usize],
) -> Result<TwoStageFold> {
    let (x_train, y_train) = data.rows(train);
    let (x_test, _) = data.rows(test);
    let q = proxies.names.len();
    let mut p_train = vec![vec![0.0; q]; train.len()];
    let mut p_test = vec![vec![0.0; q]; test.len()];
    for j in 0..q {
        let target: Vec<f64> = train.iter().map(|&i| proxies.values[i][j]).collect();
        let a = ModelArtifact::fit(
            &spec.stage1,
            seed,
            &x_train,
            &target,
            &data.columns,
            &data.log_x,
            &proxies.names[j],
            proxies.log[j],
        )?;
        let fitted = if spec.train_on_true_proxies {
            target
        } else {
            a.predict(&x_train)?
        };
        for (row, v) in p_train.iter_mut().zip(fitted) {
            row[j] = v;
        }
        for (row, v) in p_test.iter_mut().zip(a.predict(&x_test)?) {
            row[j] = v;
        }
    }
    let second = ModelArtifact::fit(
        &spec.stage2,
        seed,
        &p_train,
        &y_train,
        &proxies.names,
        &proxies.log,
        &data.target,
        data.log_y,
    )?;
    Ok(TwoStageFold {
        predicted: second.predict_report_scale(&p_test)?,
        weights: second.model.linear().map(|l| l.weights.clone()),
    })
}

/// Proxies from features, then vitality from the predicted proxies, scored
/// end to end under the same fold plan as the direct model.
pub fn two_stage_vitality(
    spec: &TwoStageSpec,
    data: &Dataset,
    proxies: &ProxyTargets,
    plan: &FoldPlan,
) -> Result<EvalReport> {
    data.validate()?;
    if proxies.values.len() != data.len() || proxies.log.len() != proxies.names.len() {
        return Err(validation!(
            "proxy targets are not aligned with the dataset"
        ));
    }
    if proxies
        .values
        .iter()
        .any(|r| r.len() != proxies.names.len())
    {
        return Err(validation!("ragged proxy matrix"));
    }
    if plan.n() != data.len() {
        return Err(validation!(
            "fold plan covers {} rows, dataset has {}",
            plan.n(),
            data.len()
        ));
    }
    let truth = report_scale_truth(data)?;
    let m = proxies.names.len();
    let jobs: Vec<(usize, usize)> = (0..plan.repeats)
        .flat_map(|r| (0..plan.k).map(move |f| (r, f)))
        .collect();
    let results = par_map(&jobs, |&(r, f)| {
        let test = &plan.folds[r][f];
        let out = two_stage_fold(spec, plan.seed, data, proxies, &plan.train(r, f), test);
        let weights = out.as_ref().ok().and_then(|o| o.weights.clone());
        (
            score_fold(r, f, test, &truth, m, out.map(|o| o.predicted)),
            weights,
        )
    });
    let mut weights: Vec<Vec<f64>> = Vec::new();
    let mut folds = Vec::with_capacity(results.len());
    for (rec, w) in results {
        if rec.error.is_none() {
            weights.extend(w);
        }
        folds.push(rec);
    }
    let family = format!("{}+{}", spec.stage1.family(), spec.stage2.family());
    let mut report = EvalReport::assemble(
        &family,
        data,
        m,
        (plan.k, plan.repeats, plan.seed),
        folds,
        &truth,
    );
    report.coefficients = (0..m)
        .filter_map(|j| {
            let col: Vec<f64> = weights.iter().map(|w| w[j]).collect();
            Stat::of(&col).map(|s| Coefficient {
                name: proxies.names[j].clone(),
                mean: s.mean,
                std: s.std,
            })
        })
        .collect();
    Ok(report)
}
