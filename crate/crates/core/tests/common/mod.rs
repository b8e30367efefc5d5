//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urbanvit::geo::{distance, Point, Polygon};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Star-shaped simple polygon around `center`: sorted random angles with
/// random radii in `[r_min, r_max]`.
pub fn star_polygon(
    rng: &mut impl Rng,
    n: usize,
    center: Point,
    r_min: f64,
    r_max: f64,
) -> Polygon {
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    let pts: Vec<Point> = angles
        .iter()
        .map(|a| {
            let r = rng.random_range(r_min..r_max);
            Point::new(center.x + r * a.cos(), center.y + r * a.sin())
        })
        .collect();
    Polygon::from_vertices(&pts).expect("star polygon is valid")
}

/// Convex polygon: `n` points on a circle at sorted random angles.
pub fn convex_polygon(rng: &mut impl Rng, n: usize, center: Point, r: f64) -> Polygon {
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup();
    let pts: Vec<Point> = angles
        .iter()
        .map(|a| Point::new(center.x + r * a.cos(), center.y + r * a.sin()))
        .collect();
    Polygon::from_vertices(&pts).expect("convex polygon is valid")
}

/// Uniform points inside `p` by rejection from its bounding box.
pub fn points_inside(rng: &mut impl Rng, p: &Polygon, n: usize) -> Vec<Point> {
    let b = p.bbox();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let q = Point::new(
            rng.random_range(b.min_x..b.max_x),
            rng.random_range(b.min_y..b.max_y),
        );
        if p.contains(q)
            && out
                .iter()
                .all(|o: &Point| distance(*o, q) > 1e-6 * (b.width() + b.height()))
        {
            out.push(q);
        }
    }
    out
}

/// Area estimate from uniform samples over the bounding box.
pub fn monte_carlo_area(rng: &mut impl Rng, p: &Polygon, samples: usize) -> f64 {
    let b = p.bbox();
    let hits = (0..samples)
        .filter(|_| {
            p.contains(Point::new(
                rng.random_range(b.min_x..b.max_x),
                rng.random_range(b.min_y..b.max_y),
            ))
        })
        .count();
    b.width() * b.height() * hits as f64 / samples as f64
}

fn circumcircle(a: Point, b: Point, c: Point) -> Option<(Point, f64)> {
    let d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
    if d.abs() < 1e-300 {
        return None;
    }
    let (a2, b2, c2) = (
        a.x * a.x + a.y * a.y,
        b.x * b.x + b.y * b.y,
        c.x * c.x + c.y * c.y,
    );
    let ux = (a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d;
    let uy = (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d;
    let o = Point::new(ux, uy);
    Some((o, distance(o, a)))
}

/// Smallest enclosing radius over every pair-diameter and triple-circumcircle
/// candidate that contains all points.
pub fn brute_force_enclosing_radius(pts: &[Point]) -> f64 {
    let covers = |o: Point, r: f64| pts.iter().all(|p| distance(o, *p) <= r * (1.0 + 1e-11));
    let mut best = f64::INFINITY;
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            let o = Point::new(0.5 * (pts[i].x + pts[j].x), 0.5 * (pts[i].y + pts[j].y));
            let r = 0.5 * distance(pts[i], pts[j]);
            if r < best && covers(o, r) {
                best = r;
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if let Some((o, r)) = circumcircle(pts[i], pts[j], pts[k]) {
                    if r < best && covers(o, r) {
                        best = r;
                    }
                }
            }
        }
    }
    best
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with matching unit eigenvectors as rows.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    (values, vectors)
}

/// Sample covariance (divisor n - 1) of the rows of `x`.
pub fn sample_covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, d) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    x.iter()
                        .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                        .sum::<f64>()
                        / (n - 1) as f64
                })
                .collect()
        })
        .collect()
}

/// Sine of the angle between two unit vectors, sign-agnostic.
pub fn sin_angle(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - dot * b).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn gaussian_matrix(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// 30 evenly spaced points of y = sin(x) on [0, 2π].
pub fn sin_fixture() -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..30).map(|i| vec![2.0 * PI * i as f64 / 29.0]).collect();
    let y = x.iter().map(|r| r[0].sin()).collect();
    (x, y)
}

/// Gaussian design with a sparse linear signal plus noise.
pub fn regression_problem(seed: u64, n: usize, m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let x = gaussian_matrix(&mut r, n, m);
    let w: Vec<f64> = (0..m)
        .map(|j| {
            if j % 3 == 0 {
                0.0
            } else {
                r.random_range(-2.0..2.0)
            }
        })
        .collect();
    let y = x
        .iter()
        .map(|row| {
            let e: f64 = StandardNormal.sample(&mut r);
            1.5 + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.3 * e
        })
        .collect();
    (x, y)
}

/// The sin fixture needs C large enough that no dual variable sits on the box.
pub const SIN_FIXTURE_C: f64 = 100.0;

/// Normalized PoI scores for `n` imagelets with uniform counts in 0..=max.
pub fn random_poi_scores(rng: &mut impl Rng, n: usize, max: u64) -> Vec<urbanvit::poi::PoiScores> {
    use urbanvit::poi::{normalize_scores, PoiScores};
    use urbanvit::raster::ImageletId;
    let mut scores: Vec<PoiScores> = (0..n)
        .map(|i| {
            let counts = [
                rng.random_range(0..=max),
                rng.random_range(0..=max),
                rng.random_range(0..=max),
            ];
            PoiScores {
                imagelet_id: ImageletId {
                    city: "c".into(),
                    row: i / 100,
                    col: i % 100,
                },
                counts,
                raw: counts.map(|c| (c as f64).ln_1p()),
                normalized: [0.0; 3],
            }
        })
        .collect();
    normalize_scores(&mut scores);
    scores
}

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Every regular file under `dir`, relative and sorted.
pub fn file_tree(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Writes a synthetic bundle from spec TOML text and returns its pipeline config path.
pub fn synth_bundle(dir: &std::path::Path, spec: &str) -> std::path::PathBuf {
    let spec = urbanvit::synth::SynthSpec::from_toml(spec).unwrap();
    urbanvit::synth::generate_city(&spec, dir).unwrap();
    dir.join("pipeline.toml")
}
