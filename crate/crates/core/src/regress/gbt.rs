//! Gradient-boosted regression trees on the Huber loss.

use serde::{Deserialize, Serialize};

use super::linear::check_xy;
use crate::error::{validation, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Quantile of the absolute residuals used as the Huber threshold.
    pub huber_quantile: f64,
    /// Compute the threshold once from the initial residuals instead of
    /// every iteration.
    pub fixed_delta: bool,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_estimators: 350,
            learning_rate: 0.01,
            max_depth: 3,
            huber_quantile: 0.9,
            fixed_delta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Nodes stored flat; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub init: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.init + self.learning_rate * self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>()
    }
}

/// Huber loss of each boosting round, evaluated with that round's threshold
/// before and after the round's tree is added.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundLoss {
    pub delta: f64,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbtFit {
    pub model: GbtModel,
    pub rounds: Vec<RoundLoss>,
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn mean_huber(res: &[f64], delta: f64) -> f64 {
    res.iter().map(|&r| huber(r, delta)).sum::<f64>() / res.len() as f64
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Minimizer of Σ huber(r_i − γ, δ) over γ. The derivative is piecewise
/// linear with kinks at r_i ± δ, so the root is found exactly.
pub fn huber_location(r: &[f64], delta: f64) -> f64 {
    if delta <= 0.0 {
        return quantile(r, 0.5);
    }
    let score = |g: f64| r.iter().map(|&v| (v - g).clamp(-delta, delta)).sum::<f64>();
    let mut kinks: Vec<f64> = r.iter().flat_map(|&v| [v - delta, v + delta]).collect();
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();
    let s: Vec<f64> = kinks.iter().map(|&k| score(k)).collect();
    // `score` falls from +nδ to −nδ; locate the zero crossing.
    let zeros: Vec<usize> = (0..kinks.len()).filter(|&i| s[i] == 0.0).collect();
    if let (Some(&a), Some(&b)) = (zeros.first(), zeros.last()) {
        return 0.5 * (kinks[a] + kinks[b]);
    }
    for i in 0..kinks.len() - 1 {
        if s[i] > 0.0 && s[i + 1] < 0.0 {
            let t = s[i] / (s[i] - s[i + 1]);
            return kinks[i] + t * (kinks[i + 1] - kinks[i]);
        }
    }
    quantile(r, 0.5)
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    resid: &'a [f64],
    delta: f64,
    max_depth: usize,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let m = self.x[0].len();
        let n = idx.len() as f64;
        let total: f64 = idx.iter().map(|&i| self.grad[i]).sum();
        let base = total * total / n;
        let mut best: Option<(usize, f64, f64)> = None;
        let mut order = idx.to_vec();
        for f in 0..m {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = 0.0;
            for k in 0..order.len() - 1 {
                left += self.grad[order[k]];
                let (va, vb) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                if va == vb {
                    continue;
                }
                let nl = (k + 1) as f64;
                let right = total - left;
                let gain = left * left / nl + right * right / (n - nl) - base;
                if gain > best.map_or(1e-12 * (1.0 + base.abs()), |b| b.2) {
                    let thr = va + 0.5 * (vb - va);
                    let thr = if thr < vb { thr } else { va };
                    best = Some((f, thr, gain));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let split = if depth < self.max_depth && idx.len() >= 2 {
            self.best_split(&idx)
        } else {
            None
        };
        match split {
            Some((feature, threshold, _)) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
                let left = self.grow(l, depth + 1);
                let right = self.grow(r, depth + 1);
                self.nodes[me] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
            None => {
                let rs: Vec<f64> = idx.iter().map(|&i| self.resid[i]).collect();
                self.nodes[me] = Node::Leaf {
                    value: huber_location(&rs, self.delta),
                };
            }
        }
        me
    }
}

pub fn fit_gbt(x: &[Vec<f64>], y: &[f64], p: &GbtParams) -> Result<GbtFit> {
    check_xy(x, y)?;
    let n = x.len();
    if n < 2 {
        return Err(validation!("gradient boosting needs at least 2 rows"));
    }
    if p.n_estimators == 0 || p.max_depth == 0 {
        return Err(validation!("n_estimators and max_depth must be positive"));
    }
    if !(p.learning_rate > 0.0 && p.learning_rate <= 1.0) {
        return Err(validation!(
            "learning rate must lie in (0, 1], got {}",
            p.learning_rate
        ));
    }
    if !(p.huber_quantile > 0.0 && p.huber_quantile <= 1.0) {
        return Err(validation!("Huber quantile must lie in (0, 1]"));
    }
    let init = quantile(y, 0.5);
    let mut f = vec![init; n];
    let mut trees = Vec::with_capacity(p.n_estimators);
    let mut rounds = Vec::with_capacity(p.n_estimators);
    let abs_q = |res: &[f64]| {
        quantile(
            &res.iter().map(|r| r.abs()).collect::<Vec<_>>(),
            p.huber_quantile,
        )
    };
    let initial: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
    let fixed = abs_q(&initial);
    for _ in 0..p.n_estimators {
        let resid: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let delta = if p.fixed_delta { fixed } else { abs_q(&resid) };
        let grad: Vec<f64> = resid.iter().map(|&r| r.clamp(-delta, delta)).collect();
        let mut g = Grower {
            x,
            grad: &grad,
            resid: &resid,
            delta,
            max_depth: p.max_depth,
            nodes: Vec::new(),
        };
        g.grow((0..n).collect(), 0);
        let tree = Tree { nodes: g.nodes };
        let before = mean_huber(&resid, delta);
        for (fi, row) in f.iter_mut().zip(x) {
            *fi += p.learning_rate * tree.predict_row(row);
        }
        let after_res: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        rounds.push(RoundLoss {
            delta,
            before,
            after: mean_huber(&after_res, delta),
        });
        trees.push(tree);
    }
    Ok(GbtFit {
        model: GbtModel {
            init,
            learning_rate: p.learning_rate,
            trees,
        },
        rounds,
    })
}
