use std::collections::BTreeMap;

use super::EvalReport;
use crate::error::{validation, Result};
use crate::geojson::{Feature, Geometry};
use crate::layers::District;

/// Rounds to 10 significant digits. Idempotent, so written values re-parse
/// to exactly the same number.
pub fn round_sig10(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.9e}").parse().expect("formatted float parses")
}

/// District polygons carrying `true`, `predicted` and `residual`.
pub fn residual_features(report: &EvalReport, districts: &[District]) -> Result<Vec<Feature>> {
    let by_id: BTreeMap<&str, &District> = districts
        .iter()
        .map(|d| (d.district_id.as_str(), d))
        .collect();
    report
        .districts
        .iter()
        .map(|p| {
            let d = by_id
                .get(p.district_id.as_str())
                .ok_or_else(|| validation!("report district `{}` has no polygon", p.district_id))?;
            Ok(Feature::new(Geometry::Polygon(d.polygon.clone()))
                .with("district_id", p.district_id.as_str())
                .with("city", p.city.as_str())
                .with("true", round_sig10(p.truth))
                .with("predicted", round_sig10(p.predicted))
                .with("residual", round_sig10(p.residual)))
        })
        .collect()
}

pub fn residuals_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("district_id,city,true,predicted,residual\n");
    for p in &report.districts {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.district_id,
            p.city,
            round_sig10(p.truth),
            round_sig10(p.predicted),
            round_sig10(p.residual)
        ));
    }
    out
}
