//! Preprocessing and the four regression families.

pub mod gbt;
pub mod linear;
pub mod preprocess;
pub mod svr;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, validation, Result};

pub use gbt::{fit_gbt, GbtFit, GbtModel, GbtParams};
pub use linear::{fit_elasticnet, fit_ols, ElasticNetFit, LinearModel};
pub use preprocess::{ColumnScaler, Preprocessor};
pub use svr::{fit_svr, GammaMode, SvrFit, SvrModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RegressorSpec {
    Ols,
    ElasticNet {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_rho")]
        rho: f64,
    },
    Svr {
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_gamma")]
        gamma: GammaMode,
        /// Kept for fidelity with the reference setup; unused by the RBF kernel.
        #[serde(default = "default_degree")]
        degree: u32,
    },
    Gbt(GbtParams),
}

fn default_alpha() -> f64 {
    0.01
}
fn default_rho() -> f64 {
    0.1
}
fn default_c() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-4
}
fn default_gamma() -> GammaMode {
    GammaMode::Scale
}
fn default_degree() -> u32 {
    3
}

impl RegressorSpec {
    pub fn elasticnet() -> Self {
        RegressorSpec::ElasticNet {
            alpha: default_alpha(),
            rho: default_rho(),
        }
    }

    pub fn svr() -> Self {
        RegressorSpec::Svr {
            c: default_c(),
            epsilon: default_epsilon(),
            gamma: default_gamma(),
            degree: default_degree(),
        }
    }

    pub fn gbt() -> Self {
        RegressorSpec::Gbt(GbtParams::default())
    }

    pub fn family(&self) -> &'static str {
        match self {
            RegressorSpec::Ols => "ols",
            RegressorSpec::ElasticNet { .. } => "elastic_net",
            RegressorSpec::Svr { .. } => "svr",
            RegressorSpec::Gbt(_) => "gbt",
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ols" => Ok(RegressorSpec::Ols),
            "elastic_net" | "elasticnet" => Ok(Self::elasticnet()),
            "svr" => Ok(Self::svr()),
            "gbt" => Ok(Self::gbt()),
            _ => Err(validation!("unknown regressor family `{name}`")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(validation!(
                "invalid {} hyperparameter: {what}",
                self.family()
            ))
        };
        match self {
            RegressorSpec::Ols => Ok(()),
            RegressorSpec::ElasticNet { alpha, rho } => {
                if !(*alpha >= 0.0 && alpha.is_finite()) {
                    return bad("alpha");
                }
                if !(0.0..=1.0).contains(rho) {
                    return bad("rho");
                }
                Ok(())
            }
            RegressorSpec::Svr {
                c, epsilon, gamma, ..
            } => {
                if !(*c > 0.0 && c.is_finite()) {
                    return bad("c");
                }
                if !(*epsilon >= 0.0 && epsilon.is_finite()) {
                    return bad("epsilon");
                }
                if let GammaMode::Value(g) = gamma {
                    if !(*g > 0.0 && g.is_finite()) {
                        return bad("gamma");
                    }
                }
                Ok(())
            }
            RegressorSpec::Gbt(p) => {
                if p.n_estimators == 0 || p.max_depth == 0 {
                    return bad("n_estimators/max_depth");
                }
                if !(p.learning_rate > 0.0 && p.learning_rate <= 1.0) {
                    return bad("learning_rate");
                }
                if !(p.huber_quantile > 0.0 && p.huber_quantile <= 1.0) {
                    return bad("huber_quantile");
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FittedModel {
    Ols(LinearModel),
    ElasticNet {
        #[serde(flatten)]
        linear: LinearModel,
        converged: bool,
        sweeps: usize,
    },
    Svr(SvrModel),
    Gbt(GbtModel),
}

impl FittedModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match self {
            FittedModel::Ols(m) => m.predict_row(x),
            FittedModel::ElasticNet { linear, .. } => linear.predict_row(x),
            FittedModel::Svr(m) => m.predict_row(x),
            FittedModel::Gbt(m) => m.predict_row(x),
        }
    }

    /// Weights of linear families, for interpretation.
    pub fn linear(&self) -> Option<&LinearModel> {
        match self {
            FittedModel::Ols(m) => Some(m),
            FittedModel::ElasticNet { linear, .. } => Some(linear),
            _ => None,
        }
    }
}

pub fn fit(spec: &RegressorSpec, x: &[Vec<f64>], y: &[f64]) -> Result<FittedModel> {
    spec.validate()?;
    Ok(match spec {
        RegressorSpec::Ols => FittedModel::Ols(fit_ols(x, y)?),
        RegressorSpec::ElasticNet { alpha, rho } => {
            let f = fit_elasticnet(x, y, *alpha, *rho)?;
            FittedModel::ElasticNet {
                linear: f.model,
                converged: f.converged,
                sweeps: f.sweeps,
            }
        }
        RegressorSpec::Svr {
            c, epsilon, gamma, ..
        } => FittedModel::Svr(fit_svr(x, y, *c, *epsilon, *gamma)?.model),
        RegressorSpec::Gbt(p) => FittedModel::Gbt(fit_gbt(x, y, p)?.model),
    })
}

/// A fitted model together with its preprocessing, ready to score raw rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub spec: RegressorSpec,
    pub seed: u64,
    pub preprocessor: Preprocessor,
    pub model: FittedModel,
}

impl ModelArtifact {
    pub fn fit(
        spec: &RegressorSpec,
        seed: u64,
        x: &[Vec<f64>],
        y: &[f64],
        columns: &[String],
        log_x: &[bool],
        target: &str,
        log_y: bool,
    ) -> Result<Self> {
        let preprocessor = Preprocessor::fit(x, y, columns, log_x, target, log_y)?;
        let xt = preprocessor.transform_x(x)?;
        let yt = preprocessor.transform_y(y)?;
        let model = fit(spec, &xt, &yt)?;
        Ok(ModelArtifact {
            spec: spec.clone(),
            seed,
            preprocessor,
            model,
        })
    }

    /// Predictions on the report scale (target after its log step).
    pub fn predict_report_scale(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        let xt = self.preprocessor.transform_x(x)?;
        let u: Vec<f64> = xt.iter().map(|r| self.model.predict_row(r)).collect();
        Ok(self.preprocessor.y_to_report_scale(&u))
    }

    /// Predictions in the target's original units.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        let xt = self.preprocessor.transform_x(x)?;
        let u: Vec<f64> = xt.iter().map(|r| self.model.predict_row(r)).collect();
        Ok(self.preprocessor.inverse_y(&u))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: ModelArtifact =
            serde_json::from_str(text).map_err(|e| format_err!("model JSON: {e}"))?;
        a.spec.validate()?;
        let width = a.preprocessor.columns.len();
        if a.preprocessor.x.len() != width {
            return Err(format_err!("model JSON: preprocessor/column mismatch"));
        }
        let ok = match &a.model {
            FittedModel::Ols(m) => m.weights.len() == width,
            FittedModel::ElasticNet { linear, .. } => linear.weights.len() == width,
            FittedModel::Svr(m) => {
                m.support.len() == m.coef.len() && m.support.iter().all(|s| s.len() == width)
            }
            FittedModel::Gbt(m) => m.trees.iter().all(|t| tree_ok(t, width)),
        };
        if !ok {
            return Err(format_err!(
                "model JSON: parameters do not match {width} columns"
            ));
        }
        Ok(a)
    }
}

fn tree_ok(t: &gbt::Tree, width: usize) -> bool {
    let n = t.nodes.len();
    if n == 0 {
        return false;
    }
    // Children must point forward so prediction always terminates.
    t.nodes.iter().enumerate().all(|(i, node)| match node {
        gbt::Node::Leaf { value } => value.is_finite(),
        gbt::Node::Split {
            feature,
            left,
            right,
            ..
        } => *feature < width && *left > i && *right > i && *left < n && *right < n,
    })
}

/// Predicts a matrix with width checking.
pub fn predict(model: &FittedModel, width: usize, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    x.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != width {
                return Err(validation!(
                    "row {i} has {} columns, model expects {width}",
                    r.len()
                ));
            }
            Ok(model.predict_row(r))
        })
        .collect()
}
