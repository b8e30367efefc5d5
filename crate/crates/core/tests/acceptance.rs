//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::*;
use rand::Rng;
use urbanvit::config::{load_city_layers, PipelineConfig};
use urbanvit::eval::{adjusted_r2, mae, r2};
use urbanvit::features::pca_fit;
use urbanvit::geo::{
    distance, min_enclosing_circle, min_enclosing_circle_of_points, polygon_area,
    voronoi_partition, Point, Polygon,
};
use urbanvit::layers::{District, LandUseCategory, LandUseLayer};
use urbanvit::poi::{divide_by_four, fit_poi_logit, PoiCategory};
use urbanvit::proxies::{
    activity_density_within, anisotropicity, compute_all, land_use_mix, PROXY_NAMES, VITALITY,
};
use urbanvit::regress::linear::elasticnet_kkt_violation;
use urbanvit::regress::{fit_elasticnet, fit_gbt, fit_ols, fit_svr, GammaMode, GbtParams};
use urbanvit::synth::{generate, write_bundle, SynthSpec};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn geometry_suite() -> Outcome {
    let (mut worst_area, mut worst_mec, mut worst_cover) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..50u64 {
        let mut r = rng(10_000 + i);
        let n = r.random_range(3..=24);
        let cx = r.random_range(-100.0..100.0);
        let poly = star_polygon(&mut r, n, Point::new(cx, 5.0), 20.0, 40.0);
        let area = polygon_area(&poly);
        let mc = monte_carlo_area(&mut r, &poly, 1_000_000);
        worst_area = worst_area.max(rel_diff(area, mc));

        let pts: Vec<Point> = (0..r.random_range(20..=120))
            .map(|_| Point::new(r.random_range(-50.0..50.0), r.random_range(-30.0..30.0)))
            .collect();
        let brute = brute_force_enclosing_radius(&pts);
        let c = min_enclosing_circle_of_points(&pts).map_err(|e| e.to_string())?;
        worst_mec = worst_mec.max((c.radius - brute).abs() / brute);
        let c = min_enclosing_circle(&poly).map_err(|e| e.to_string())?;
        let brute = brute_force_enclosing_radius(poly.vertices());
        worst_mec = worst_mec.max((c.radius - brute).abs() / brute);

        let n_sites = r.random_range(1..=30);
        let sites = points_inside(&mut r, &poly, n_sites);
        let cells = voronoi_partition(&sites, &poly).map_err(|e| e.to_string())?;
        let covered: f64 = cells.iter().map(|c| polygon_area(&c.cell)).sum();
        worst_cover = worst_cover.max(rel_diff(covered, area));
        let b = poly.bbox();
        for _ in 0..2000 {
            let q = Point::new(
                r.random_range(b.min_x..b.max_x),
                r.random_range(b.min_y..b.max_y),
            );
            if !poly.contains(q) {
                continue;
            }
            let nearest = sites
                .iter()
                .map(|s| distance(*s, q))
                .fold(f64::INFINITY, f64::min);
            let owner = cells.iter().find(|c| c.cell.contains(q));
            ensure!(owner.is_some(), "fixture {i}: {q:?} lies in no cell");
            ensure!(
                distance(owner.unwrap().site, q) <= nearest + 1e-9,
                "fixture {i}: {q:?} in a farther cell"
            );
        }
    }
    ensure!(
        worst_area <= 0.01,
        "area vs Monte Carlo off by {worst_area:.3e}"
    );
    ensure!(worst_mec <= 1e-9, "enclosing radius off by {worst_mec:.3e}");
    ensure!(
        worst_cover <= 1e-6,
        "Voronoi coverage off by {worst_cover:.3e}"
    );
    Ok(format!(
        "50 fixtures; area {worst_area:.2e}, radius {worst_mec:.2e}, coverage {worst_cover:.2e}"
    ))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

fn proxy_closed_loop() -> Outcome {
    let spec = SynthSpec {
        n_cities: 2,
        districts_x: 5,
        districts_y: 4,
        ..Default::default()
    };
    let bundle = generate(&spec).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_bundle(&bundle, dir.path()).map_err(|e| e.to_string())?;
    let cfg =
        PipelineConfig::load(&dir.path().join("pipeline.toml"), &[]).map_err(|e| e.to_string())?;
    let mut n = 0;
    for city in &cfg.cities {
        let layers = load_city_layers(city).map_err(|e| e.to_string())?;
        let report = compute_all(&layers.districts, &layers.proxies);
        ensure!(report.issues.is_empty(), "issues: {:?}", report.issues);
        for rec in &report.records {
            let (_, truth) = bundle
                .truth
                .iter()
                .find(|(_, t)| t.district_id == rec.district_id)
                .ok_or_else(|| format!("{} missing from truth", rec.district_id))?;
            for name in PROXY_NAMES.iter().chain([&VITALITY]) {
                let (a, b) = (rec.get(name), truth.get(name));
                ensure!(
                    matches!((a, b), (Some(a), Some(b)) if close(a, b, 1e-9)),
                    "{} {name}: {a:?} vs {b:?}",
                    rec.district_id
                );
            }
            n += 1;
        }
    }
    ensure!(n == 40, "{n} districts recomputed, expected 40");

    let square = generate(&SynthSpec {
        max_aspect: 1.0,
        districts_x: 4,
        districts_y: 3,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for d in square.cities.iter().flat_map(|c| &c.districts) {
        let a = anisotropicity(d).map_err(|e| e.to_string())?;
        worst = worst.max((a - 2.0 / std::f64::consts::PI).abs());
    }
    ensure!(worst <= 1e-9, "square blocks off 2/pi by {worst:.3e}");

    let d = District::new(
        "d",
        "c",
        Polygon::rect(0.0, 0.0, 3.0, 1.0).map_err(|e| e.to_string())?,
    );
    let strip = |x: f64| Polygon::rect(x, 0.0, x + 1.0, 1.0).unwrap();
    let lu = LandUseLayer {
        features: vec![
            (strip(0.0), LandUseCategory::Residential),
            (
                strip(1.0),
                LandUseCategory::CommercialIndustrialInstitutional,
            ),
            (strip(2.0), LandUseCategory::RecreationalParksWater),
        ],
    };
    let mix = land_use_mix(&d, &lu).map_err(|e| e.to_string())?;
    ensure!((mix - 1.0).abs() <= 1e-12, "equal thirds give {mix}");
    Ok(format!(
        "{n} districts within 1e-9; square blocks {worst:.1e} from 2/pi; equal thirds {mix}"
    ))
}

fn activity_conservation() -> Outcome {
    let spec = SynthSpec {
        water: false,
        districts_x: 4,
        districts_y: 3,
        ..Default::default()
    };
    let bundle = generate(&spec).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for city in &bundle.cities {
        let bb = city
            .districts
            .iter()
            .map(|d| d.polygon.bbox())
            .reduce(|a, b| a.union(&b))
            .ok_or("city without districts")?;
        let bound =
            Polygon::rect(bb.min_x, bb.min_y, bb.max_x, bb.max_y).map_err(|e| e.to_string())?;
        let s = activity_density_within(&city.districts, &city.activity, &bound)
            .map_err(|e| e.to_string())?;
        let total: f64 = city.activity.sites.iter().map(|s| s.connections).sum();
        worst = worst.max(rel_diff(s.values().sum(), total));
    }
    ensure!(
        worst <= 1e-6,
        "district sum off the site total by {worst:.3e}"
    );
    Ok(format!("relative mismatch {worst:.2e}"))
}

fn solvers() -> Outcome {
    let mut worst_kkt = 0.0f64;
    for seed in 0..20 {
        let (x, y) = regression_problem(300 + seed, 60, 6);
        let fit = fit_elasticnet(&x, &y, 0.05, 0.5).map_err(|e| e.to_string())?;
        worst_kkt = worst_kkt.max(elasticnet_kkt_violation(&x, &y, &fit.model, 0.05, 0.5));
    }
    ensure!(
        worst_kkt < 1e-6,
        "elastic net KKT violation {worst_kkt:.3e}"
    );

    let (x, y) = regression_problem(4, 50, 5);
    let en = fit_elasticnet(&x, &y, 0.0, 0.1)
        .map_err(|e| e.to_string())?
        .model;
    let ols = fit_ols(&x, &y).map_err(|e| e.to_string())?;
    let gap = en
        .weights
        .iter()
        .zip(&ols.weights)
        .map(|(a, b)| (a - b).abs())
        .fold((en.intercept - ols.intercept).abs(), f64::max);
    ensure!(
        gap < 1e-6,
        "unpenalized elastic net differs from OLS by {gap:.3e}"
    );

    let (x, y) = regression_problem(1, 60, 5);
    let m = fit_ols(&x, &y).map_err(|e| e.to_string())?;
    let res: Vec<f64> = x
        .iter()
        .zip(&y)
        .map(|(r, t)| t - m.predict_row(r))
        .collect();
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut ortho = res.iter().sum::<f64>().abs() / ynorm;
    for j in 0..5 {
        let xnorm = x.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
        let dot: f64 = x.iter().zip(&res).map(|(r, e)| r[j] * e).sum();
        ortho = ortho.max(dot.abs() / (xnorm * ynorm));
    }
    ensure!(ortho < 1e-8, "OLS residual not orthogonal: {ortho:.3e}");

    let (x, y) = regression_problem(9, 80, 4);
    let fit = fit_gbt(&x, &y, &GbtParams::default()).map_err(|e| e.to_string())?;
    ensure!(
        fit.rounds.len() == 350,
        "{} boosting rounds",
        fit.rounds.len()
    );
    ensure!(
        fit.rounds.iter().all(|r| r.after <= r.before + 1e-15),
        "a boosting round raised the Huber loss"
    );
    let fixed = fit_gbt(
        &x,
        &y,
        &GbtParams {
            fixed_delta: true,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        fixed
            .rounds
            .windows(2)
            .all(|w| w[1].after <= w[0].after + 1e-15),
        "fixed-delta loss sequence rose"
    );

    let (x, y) = sin_fixture();
    let n = x.len();
    let mut tube = 0.0f64;
    for c in [1.0, SIN_FIXTURE_C] {
        let fit = fit_svr(&x, &y, c, 1e-4, GammaMode::Scale).map_err(|e| e.to_string())?;
        ensure!(fit.converged, "SVR did not converge at C={c}");
        ensure!(
            fit.alpha.iter().all(|&a| (0.0..=c).contains(&a)),
            "dual outside [0, {c}]"
        );
        let balance: f64 = (0..n).map(|i| fit.alpha[i] - fit.alpha[n + i]).sum();
        ensure!(balance.abs() < 1e-8, "dual balance {balance:.3e} at C={c}");
        if c == SIN_FIXTURE_C {
            for (r, t) in x.iter().zip(&y) {
                tube = tube.max((fit.model.predict_row(r) - t).abs());
            }
        }
    }
    ensure!(
        tube <= 1e-4 + 1e-3,
        "sine fixture leaves the tube by {tube:.3e}"
    );
    Ok(format!("KKT {worst_kkt:.1e}, EN-OLS {gap:.1e}, orthogonality {ortho:.1e}, GBT 350 rounds monotone, SVR max residual {tube:.1e}"))
}

fn pca_oracle() -> Outcome {
    let mut r = rng(50);
    let (mut worst_val, mut worst_angle) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let mut x = gaussian_matrix(&mut r, 50, 8);
        for row in x.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= 1.0 + j as f64;
            }
        }
        let model = pca_fit(&x, 8).map_err(|e| e.to_string())?;
        let (values, vectors) = jacobi_eigen(sample_covariance(&x));
        for k in 0..8 {
            worst_val =
                worst_val.max((model.explained_variance[k] - values[k]).abs() / values[0].max(1.0));
        }
        // Largest principal angle between the leading-k subspaces.
        for k in 1..8 {
            for u in &model.components[..k] {
                let mut resid = u.clone();
                for v in &vectors[..k] {
                    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                    resid.iter_mut().zip(v).for_each(|(a, b)| *a -= dot * b);
                }
                worst_angle = worst_angle.max(resid.iter().map(|a| a * a).sum::<f64>().sqrt());
            }
        }
    }
    ensure!(worst_val <= 1e-8, "eigenvalues differ by {worst_val:.3e}");
    ensure!(worst_angle < 1e-6, "principal angle sine {worst_angle:.3e}");
    Ok(format!(
        "20 matrices; eigenvalues {worst_val:.1e}, subspace sine {worst_angle:.1e}"
    ))
}

fn metrics() -> Outcome {
    let adj = adjusted_r2(0.5, 20, 3).map_err(|e| e.to_string())?;
    ensure!(adj == 0.40625, "adjusted R² {adj}");
    let y = [1.0, 2.0, 3.0, 4.0, 5.0];
    let perfect = (
        r2(&y, &y).map_err(|e| e.to_string())?,
        mae(&y, &y).map_err(|e| e.to_string())?,
    );
    ensure!(
        perfect == (1.0, 0.0),
        "perfect predictions give {perfect:?}"
    );
    let mean = [3.0; 5];
    let flat = r2(&y, &mean).map_err(|e| e.to_string())?;
    ensure!(flat == 0.0, "mean predictor R² {flat}");
    let off = mae(&y, &[2.0, 3.0, 4.0, 5.0, 6.0]).map_err(|e| e.to_string())?;
    ensure!(off == 1.0, "unit shift MAE {off}");
    Ok("adjusted 0.40625, perfect (1, 0), mean predictor 0, unit shift MAE 1".into())
}

fn run_pipeline(config: &Path, out: Option<&Path>) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_urbanvit"));
    cmd.env("URBANVIT_LOG", "error")
        .args(["run", "--stage", "all", "--config"])
        .arg(config);
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    let output = cmd.output().map_err(|e| e.to_string())?;
    ensure!(
        output.status.success(),
        "pipeline failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    Ok(())
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn r2_mean(report: &serde_json::Value) -> Result<f64, String> {
    report["r2"]["mean"]
        .as_f64()
        .ok_or_else(|| "report without an R² mean".to_string())
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = synth_bundle(dir.path(), "target_r2 = 0.6\n");
    run_pipeline(&config, None)?;
    let out = dir.path().join("out");
    let svr = r2_mean(&read_json(&out.join("eval/report.json"))?)?;
    let two_stage = r2_mean(&read_json(&out.join("two_stage/report.json"))?)?;
    ensure!(
        (0.35..=0.75).contains(&svr),
        "SVR R² {svr:.4} outside [0.35, 0.75]"
    );
    ensure!(two_stage > 0.2, "two-stage R² {two_stage:.4}");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = synth_bundle(dir.path(), "target_r2 = 0.6\nn_cities = 3\n");
    run_pipeline(&config, None)?;
    let mut rdr = csv::Reader::from_path(dir.path().join("out/loco/summary.csv"))
        .map_err(|e| e.to_string())?;
    let mut per_city = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| e.to_string())?;
        let v: f64 = row[2]
            .parse()
            .map_err(|e| format!("loco R² for {}: {e}", &row[0]))?;
        per_city.push(format!("{} {v:.3}", &row[0]));
        ensure!(v > 0.0, "held-out city {} has R² {v:.4}", &row[0]);
    }
    ensure!(per_city.len() == 3, "{} held-out cities", per_city.len());
    Ok(format!(
        "SVR R² {svr:.4}, two-stage {two_stage:.4}; held-out cities: {}",
        per_city.join(", ")
    ))
}

fn poi_logit() -> Outcome {
    let mut r = rng(1000);
    let scores = random_poi_scores(&mut r, 1000, 12);
    let classes: Vec<bool> = scores
        .iter()
        .map(|s| r.random::<f64>() < sigmoid(4.0 * (s.score(PoiCategory::Sustenance) - 0.5)))
        .collect();
    let m = fit_poi_logit("vitality", &classes, &scores).map_err(|e| e.to_string())?;
    let sus = m
        .coefficients
        .iter()
        .find(|c| c.name == "sustenance")
        .ok_or("no sustenance coefficient")?;
    ensure!(
        sus.beta > 0.0 && sus.p_value < 0.05,
        "planted sustenance: beta {} p {}",
        sus.beta,
        sus.p_value
    );
    let planted_p = sus.p_value;

    let mut clean = 0;
    for seed in 0..20 {
        let mut r = rng(2000 + seed);
        let scores = random_poi_scores(&mut r, 1000, 12);
        let classes: Vec<bool> = (0..1000).map(|_| r.random()).collect();
        let m = fit_poi_logit("null", &classes, &scores).map_err(|e| e.to_string())?;
        if m.coefficients.iter().all(|c| c.p_value >= 0.05) {
            clean += 1;
        }
    }
    ensure!(
        clean >= 18,
        "only {clean}/20 null fits free of false positives"
    );

    let mut m = m;
    m.coefficients[0].beta = 0.06;
    let pct = divide_by_four(&m)[0].percent;
    ensure!(pct == 1.5, "0.06 maps to {pct}%");
    Ok(format!(
        "planted p {planted_p:.2e}; null clean {clean}/20; 0.06 -> {pct}%"
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = synth_bundle(
        dir.path(),
        "target_r2 = 0.6\nn_cities = 2\ndistricts_x = 8\ndistricts_y = 6\n",
    );
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    run_pipeline(&config, Some(&a))?;
    run_pipeline(&config, Some(&b))?;
    let (ta, tb) = (file_tree(&a), file_tree(&b));
    ensure!(ta == tb, "different file sets");
    for rel in &ta {
        let same = std::fs::read(a.join(rel)).ok() == std::fs::read(b.join(rel)).ok();
        ensure!(same, "{} differs", rel.display());
    }
    Ok(format!("{} files byte-identical", ta.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("geometry", geometry_suite),
        ("proxy_closed_loop", proxy_closed_loop),
        ("activity_conservation", activity_conservation),
        ("solvers", solvers),
        ("pca_oracle", pca_oracle),
        ("metrics", metrics),
        ("end_to_end", end_to_end),
        ("poi_logit", poi_logit),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason} [{secs:.1}s]");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
