//! True-versus-predicted scatter plots as standalone SVG.

use crate::error::{validation, Result};
use crate::eval::{mae, EvalReport};
use crate::features::pearson;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitLine {
    pub intercept: f64,
    pub slope: f64,
}

/// Least-squares line of predicted on true values.
pub fn fit_line(truth: &[f64], predicted: &[f64]) -> Result<FitLine> {
    if truth.len() != predicted.len() || truth.len() < 2 {
        return Err(validation!("a fit line needs at least 2 paired points"));
    }
    let n = truth.len() as f64;
    let mx = truth.iter().sum::<f64>() / n;
    let my = predicted.iter().sum::<f64>() / n;
    let sxx: f64 = truth.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = truth
        .iter()
        .zip(predicted)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    if sxx == 0.0 {
        return Err(validation!("true values are constant; no fit line"));
    }
    let slope = sxy / sxx;
    Ok(FitLine {
        intercept: my - slope * mx,
        slope,
    })
}

const W: f64 = 480.0;
const H: f64 = 480.0;
const PAD: f64 = 56.0;

fn num(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders a scatter of (true, predicted) pairs with the fit line and an
/// annotation block. Output depends only on the inputs.
pub fn scatter_svg(
    title: &str,
    truth: &[f64],
    predicted: &[f64],
    r2_adj: Option<f64>,
) -> Result<String> {
    let line = fit_line(truth, predicted)?;
    let r = pearson(truth, predicted);
    let err = mae(truth, predicted)?;
    let lo = truth
        .iter()
        .chain(predicted)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = truth
        .iter()
        .chain(predicted)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (lo, hi) = (lo - 0.05 * span, hi + 0.05 * span);
    let sx = |v: f64| PAD + (v - lo) / (hi - lo) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    ));
    s.push_str(&format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    ));
    for (x, y) in truth.iter().zip(predicted) {
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"steelblue\" fill-opacity=\"0.7\"/>\n",
            num(sx(*x)),
            num(sy(*y))
        ));
    }
    let (y0, y1) = (
        line.intercept + line.slope * lo,
        line.intercept + line.slope * hi,
    );
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"green\" stroke-width=\"1.5\"/>\n",
        num(sx(lo)),
        num(sy(y0)),
        num(sx(hi)),
        num(sy(y1))
    ));
    let mut notes = Vec::new();
    if let Some(a) = r2_adj {
        notes.push(format!("R²adj = {a:.3}"));
    }
    notes.push(format!("R = {r:.3}"));
    notes.push(format!("MAE = {err:.3}"));
    for (i, n) in notes.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{n}</text>\n",
            PAD + 8.0,
            PAD + 18.0 + 16.0 * i as f64
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">true</text>\n",
        W / 2.0,
        H - 16.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">predicted</text>\n",
        H / 2.0,
        H / 2.0
    ));
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Scatter of a report's per-district predictions.
pub fn emit_scatter(report: &EvalReport) -> Result<String> {
    if report.districts.len() < 2 {
        return Err(validation!(
            "scatter needs at least 2 predictions, report has {}",
            report.districts.len()
        ));
    }
    let truth: Vec<f64> = report.districts.iter().map(|d| d.truth).collect();
    let pred: Vec<f64> = report.districts.iter().map(|d| d.predicted).collect();
    let title = format!("{} ({})", report.target, report.family);
    scatter_svg(&title, &truth, &pred, report.r2_adj.map(|s| s.mean))
}
