//! Imagelet embeddings, PCA reduction and district feature vectors.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, validation, Error, Result};
use crate::geo::Point;
use crate::raster::{ImageletId, TILE};

pub const BASELINE_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub imagelet_id: ImageletId,
    pub z: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, s) = values
        .clone()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = s / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// 32 hand-crafted statistics of a 64x64 RGB tile: per band mean, standard
/// deviation and an 8-bin histogram, then mean and standard deviation of
/// the grayscale gradient magnitude.
pub fn baseline_features(pixels: &[u8]) -> Vec<f64> {
    assert_eq!(pixels.len(), TILE * TILE * 3, "imagelet must be 64x64 RGB");
    let npx = (TILE * TILE) as f64;
    let mut out = Vec::with_capacity(BASELINE_DIM);
    for band in 0..3 {
        let vals = pixels.iter().skip(band).step_by(3).map(|&v| v as f64);
        let (m, s) = mean_std(vals);
        out.push(m);
        out.push(s);
        let mut hist = [0usize; 8];
        for &v in pixels.iter().skip(band).step_by(3) {
            hist[(v / 32) as usize] += 1;
        }
        out.extend(hist.iter().map(|&c| c as f64 / npx));
    }

    let gray: Vec<f64> = pixels
        .chunks_exact(3)
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
        .collect();
    let g = |r: usize, c: usize| gray[r * TILE + c];
    let diff = |lo: f64, hi: f64, span: f64| (hi - lo) / span;
    let mut mags = Vec::with_capacity(TILE * TILE);
    for r in 0..TILE {
        for c in 0..TILE {
            let gx = match c {
                0 => diff(g(r, 0), g(r, 1), 1.0),
                c if c == TILE - 1 => diff(g(r, c - 1), g(r, c), 1.0),
                c => diff(g(r, c - 1), g(r, c + 1), 2.0),
            };
            let gy = match r {
                0 => diff(g(0, c), g(1, c), 1.0),
                r if r == TILE - 1 => diff(g(r - 1, c), g(r, c), 1.0),
                r => diff(g(r - 1, c), g(r + 1, c), 2.0),
            };
            mags.push(gx.hypot(gy));
        }
    }
    let (m, s) = mean_std(mags.iter().copied());
    out.push(m);
    out.push(s);
    out
}

/// Parses the embedding CSV (`imagelet_id,z_0,...,z_{D-1}`).
pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingVector>> {
    Ok(parse_vectors(text, "z", "embedding")?
        .into_iter()
        .map(|(imagelet_id, z)| EmbeddingVector { imagelet_id, z })
        .collect())
}

/// Parses per-imagelet component vectors (`imagelet_id,v_0,...`).
pub fn parse_components(text: &str) -> Result<Vec<ComponentVector>> {
    Ok(parse_vectors(text, "v", "component")?
        .into_iter()
        .map(|(imagelet_id, v)| ComponentVector { imagelet_id, v })
        .collect())
}

fn parse_vectors(text: &str, prefix: &str, what: &str) -> Result<Vec<(ImageletId, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| format_err!("{what} header: {e}"))?
        .clone();
    if header.len() < 2 || &header[0] != "imagelet_id" {
        return Err(format_err!(
            "{what} header must start with `imagelet_id,{prefix}_0`"
        ));
    }
    for (k, name) in header.iter().skip(1).enumerate() {
        if name != format!("{prefix}_{k}") {
            return Err(format_err!(
                "{what} column {} should be `{prefix}_{k}`, got `{name}`",
                k + 1
            ));
        }
    }
    let dim = header.len() - 1;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err!("{what} row {}: {e}", i + 1))?;
        if rec.len() != dim + 1 {
            return Err(format_err!(
                "{what} row {} has {} values, expected {dim}",
                i + 1,
                rec.len().saturating_sub(1)
            ));
        }
        let id: ImageletId = rec[0].parse()?;
        if !seen.insert(id.clone()) {
            return Err(format_err!("duplicate {what} for `{id}`"));
        }
        let z = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format_err!("{what} row {}: non-finite value `{s}`", i + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((id, z));
    }
    if out.is_empty() {
        return Err(format_err!("{what} file has a header but no rows"));
    }
    Ok(out)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingVector>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text).map_err(|e| format_err!("{}: {e}", path.display()))
}

pub fn embeddings_to_csv(zs: &[EmbeddingVector]) -> Result<String> {
    vectors_to_csv(
        zs.iter().map(|e| (&e.imagelet_id, e.z.as_slice())),
        "z",
        "embedding",
    )
}

pub fn components_to_csv(vs: &[ComponentVector]) -> Result<String> {
    vectors_to_csv(
        vs.iter().map(|c| (&c.imagelet_id, c.v.as_slice())),
        "v",
        "component",
    )
}

fn vectors_to_csv<'a>(
    rows: impl Iterator<Item = (&'a ImageletId, &'a [f64])> + Clone,
    prefix: &str,
    what: &str,
) -> Result<String> {
    let dim = rows.clone().next().map_or(0, |(_, z)| z.len());
    let mut s = String::from("imagelet_id");
    for k in 0..dim {
        s.push_str(&format!(",{prefix}_{k}"));
    }
    s.push('\n');
    for (id, z) in rows {
        if z.len() != dim {
            return Err(validation!(
                "{what} `{id}` has length {}, expected {dim}",
                z.len()
            ));
        }
        s.push_str(&id.to_string());
        for v in z {
            if !v.is_finite() {
                return Err(validation!("{what} `{id}` has a non-finite entry"));
            }
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Orthonormal rows, one per component.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Set when the data had fewer informative directions than requested.
    pub reduced_rank: bool,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.mean.len() {
            return Err(validation!(
                "vector has length {}, PCA model expects {}",
                z.len(),
                self.mean.len()
            ));
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(z)
                    .zip(&self.mean)
                    .map(|((a, x), m)| a * (x - m))
                    .sum()
            })
            .collect())
    }
}

/// PCA through the SVD of the centered data. Each component's sign is fixed
/// so its largest-magnitude entry is positive.
pub fn pca_fit(zs: &[Vec<f64>], n_comp: usize) -> Result<PcaModel> {
    let n = zs.len();
    if n_comp == 0 {
        return Err(validation!("n_comp must be at least 1"));
    }
    if n <= n_comp {
        return Err(validation!("PCA needs more than {n_comp} vectors, got {n}"));
    }
    let d = zs[0].len();
    if zs.iter().any(|z| z.len() != d) {
        return Err(validation!("embedding vectors differ in length"));
    }
    if d < n_comp {
        return Err(validation!(
            "embedding dimension {d} is below n_comp {n_comp}"
        ));
    }
    let mut mean = vec![0.0; d];
    for z in zs {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| zs[i][j] - mean[j]);
    let svd = centered.svd(false, true);
    let vt = svd.v_t.as_ref().expect("requested right singular vectors");
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let smax = s.iter().copied().fold(0.0, f64::max);
    let tol = smax * (n.max(d) as f64) * f64::EPSILON;
    let rank = order.iter().filter(|&&k| s[k] > tol).count();
    if rank == 0 {
        return Err(validation!("embeddings have zero variance"));
    }
    let kept = n_comp.min(rank);
    let reduced_rank = kept < n_comp;
    if reduced_rank {
        warn!("PCA rank {rank} is below n_comp {n_comp}; keeping {kept} components");
    }
    let mut components = Vec::with_capacity(kept);
    let mut explained_variance = Vec::with_capacity(kept);
    for &k in order.iter().take(kept) {
        let mut row: Vec<f64> = vt.row(k).iter().copied().collect();
        let lead = row
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, v)| v)
            .unwrap_or(1.0);
        if lead < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row);
        explained_variance.push(s[k] * s[k] / (n - 1) as f64);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        reduced_rank,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentVector {
    pub imagelet_id: ImageletId,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistrictFeatureVector {
    pub district_id: String,
    pub city: String,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Mean pairwise Pearson correlation of the district's component vectors.
    pub p: f64,
    pub n: usize,
    pub centroid: Point,
}

impl DistrictFeatureVector {
    pub fn values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.mu.len() + 4);
        v.extend(&self.mu);
        v.extend(&self.sigma);
        v.extend([self.p, self.n as f64, self.centroid.x, self.centroid.y]);
        v
    }
}

/// Pearson correlation of two equal-length vectors; 0 when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(a.len().cmp(&b.len()))
}

pub fn aggregate_district(
    district_id: &str,
    city: &str,
    vs: &[Vec<f64>],
    centroid: Point,
) -> Result<DistrictFeatureVector> {
    if vs.is_empty() {
        return Err(validation!("district {district_id} has no imagelets"));
    }
    let k = vs[0].len();
    if vs.iter().any(|v| v.len() != k) {
        return Err(validation!(
            "district {district_id}: component vectors differ in length"
        ));
    }
    // Fixed summation order regardless of input order.
    let mut sorted: Vec<&Vec<f64>> = vs.iter().collect();
    sorted.sort_by(|a, b| lex_cmp(a, b));
    let n = sorted.len();
    let mut mu = vec![0.0; k];
    let mut sigma = vec![0.0; k];
    for j in 0..k {
        let (m, s) = mean_std(sorted.iter().map(|v| v[j]));
        mu[j] = m;
        sigma[j] = if n == 1 { 0.0 } else { s };
    }
    let p = if n < 2 {
        0.0
    } else {
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += pearson(sorted[i], sorted[j]);
            }
        }
        total / (n * (n - 1) / 2) as f64
    };
    Ok(DistrictFeatureVector {
        district_id: district_id.to_string(),
        city: city.to_string(),
        mu,
        sigma,
        p,
        n,
        centroid,
    })
}

pub fn feature_column_names(n_comp: usize) -> Vec<String> {
    let mut cols: Vec<String> = (0..n_comp).map(|k| format!("mu_{k}")).collect();
    cols.extend((0..n_comp).map(|k| format!("sigma_{k}")));
    cols.extend(["p", "n", "c_x", "c_y"].map(String::from));
    cols
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub district_ids: Vec<String>,
    pub cities: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn build_design_matrix(xs: &[DistrictFeatureVector]) -> Result<DesignMatrix> {
    let k = xs.first().map_or(0, |x| x.mu.len());
    if xs.iter().any(|x| x.mu.len() != k || x.sigma.len() != k) {
        return Err(validation!("district feature vectors mix component counts"));
    }
    Ok(DesignMatrix {
        district_ids: xs.iter().map(|x| x.district_id.clone()).collect(),
        cities: xs.iter().map(|x| x.city.clone()).collect(),
        columns: feature_column_names(k),
        rows: xs.iter().map(DistrictFeatureVector::values).collect(),
    })
}

pub fn district_features_to_csv(xs: &[DistrictFeatureVector]) -> Result<String> {
    let k = xs.first().map_or(0, |x| x.mu.len());
    let mut s = String::from("district_id,city");
    for c in feature_column_names(k) {
        s.push(',');
        s.push_str(&c);
    }
    s.push('\n');
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for x in xs {
        if x.mu.len() != k || x.sigma.len() != k {
            return Err(validation!("district feature vectors mix component counts"));
        }
        let mut rec = vec![x.district_id.clone(), x.city.clone()];
        rec.extend(x.mu.iter().chain(&x.sigma).map(|v| v.to_string()));
        rec.extend([
            x.p.to_string(),
            x.n.to_string(),
            x.centroid.x.to_string(),
            x.centroid.y.to_string(),
        ]);
        w.write_record(&rec).expect("in-memory write");
    }
    s.push_str(std::str::from_utf8(&w.into_inner().expect("in-memory flush")).expect("utf-8"));
    Ok(s)
}

pub fn parse_district_features(text: &str) -> Result<Vec<DistrictFeatureVector>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| format_err!("district feature header: {e}"))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 8 || !(header.len() - 6).is_multiple_of(2) {
        return Err(format_err!(
            "district feature CSV has {} columns",
            header.len()
        ));
    }
    let k = (header.len() - 6) / 2;
    let mut expected = vec!["district_id".to_string(), "city".to_string()];
    expected.extend(feature_column_names(k));
    if header != expected {
        return Err(format_err!("district feature CSV has unexpected header"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err!("district feature row {}: {e}", i + 1))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    format_err!("district feature row {}: bad number `{}`", i + 1, &rec[j])
                })
        };
        let vals = (2..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        let n: usize = rec[2 + 2 * k + 1]
            .parse()
            .map_err(|_| format_err!("district feature row {}: bad count", i + 1))?;
        if n == 0 {
            return Err(format_err!(
                "district feature row {}: zero imagelets",
                i + 1
            ));
        }
        out.push(DistrictFeatureVector {
            district_id: rec[0].to_string(),
            city: rec[1].to_string(),
            mu: vals[..k].to_vec(),
            sigma: vals[k..2 * k].to_vec(),
            p: vals[2 * k],
            n,
            centroid: Point::new(vals[2 * k + 2], vals[2 * k + 3]),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: u8) -> Vec<u8> {
        vec![v; TILE * TILE * 3]
    }

    #[test]
    fn constant_images() {
        let f = baseline_features(&constant(0));
        assert_eq!(f.len(), BASELINE_DIM);
        for b in 0..3 {
            assert_eq!(f[b * 10], 0.0);
            assert_eq!(f[b * 10 + 1], 0.0);
            assert_eq!(f[b * 10 + 2], 1.0);
            assert!(f[b * 10 + 3..b * 10 + 10].iter().all(|&v| v == 0.0));
        }
        assert_eq!(&f[30..], &[0.0, 0.0]);

        let f = baseline_features(&constant(128));
        for b in 0..3 {
            assert_eq!(f[b * 10], 128.0);
            assert_eq!(f[b * 10 + 1], 0.0);
            assert_eq!(f[b * 10 + 2 + 4], 1.0);
        }
    }

    #[test]
    fn embedding_csv_round_trip_and_errors() {
        let zs = vec![
            EmbeddingVector {
                imagelet_id: "a:0:0".parse().unwrap(),
                z: vec![1.0, -2.5, 0.1, 3e-12],
            },
            EmbeddingVector {
                imagelet_id: "a:0:1".parse().unwrap(),
                z: vec![0.0, 1.0, 2.0, 3.0],
            },
            EmbeddingVector {
                imagelet_id: "b:4:1".parse().unwrap(),
                z: vec![9.0, 8.0, 7.0, 6.0],
            },
        ];
        let text = embeddings_to_csv(&zs).unwrap();
        assert_eq!(parse_embeddings(&text).unwrap(), zs);

        let nan = "imagelet_id,z_0\na:0:0,NaN\n";
        assert!(matches!(parse_embeddings(nan), Err(Error::Format(_))));
        let ragged = "imagelet_id,z_0,z_1\na:0:0,1,2\na:0:1,1\n";
        assert!(parse_embeddings(ragged).is_err());
        let bad_id = "imagelet_id,z_0\nnope,1\n";
        assert!(parse_embeddings(bad_id).is_err());
    }

    #[test]
    fn pca_line_direction() {
        let zs: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 - 20.0;
                let wobble = if i % 2 == 0 { 1e-6 } else { -1e-6 };
                vec![t + wobble, 2.0 * t - wobble]
            })
            .collect();
        let m = pca_fit(&zs, 1).unwrap();
        let c = &m.components[0];
        let s5 = 5f64.sqrt();
        assert!((c[0] - 1.0 / s5).abs() < 1e-6 && (c[1] - 2.0 / s5).abs() < 1e-6);
        assert_eq!(m.transform(&m.mean).unwrap(), vec![0.0]);
        assert!(m.transform(&[1.0]).is_err());
    }

    #[test]
    fn pca_rank_deficiency_is_flagged() {
        let zs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0, 0.0]).collect();
        let m = pca_fit(&zs, 2).unwrap();
        assert!(m.reduced_rank);
        assert_eq!(m.n_components(), 1);
        assert!(pca_fit(&vec![vec![1.0, 1.0]; 5], 1).is_err());
    }

    #[test]
    fn aggregate_conventions() {
        let c = Point::new(1.0, 2.0);
        let one = aggregate_district("d", "x", &[vec![1.0, 2.0, 4.0]], c).unwrap();
        assert_eq!(one.mu, vec![1.0, 2.0, 4.0]);
        assert_eq!(one.sigma, vec![0.0; 3]);
        assert_eq!((one.p, one.n), (0.0, 1));
        assert_eq!(one.values().len(), 2 * 3 + 4);

        let two =
            aggregate_district("d", "x", &[vec![1.0, 2.0, 4.0], vec![1.0, 2.0, 4.0]], c).unwrap();
        assert!((two.p - 1.0).abs() < 1e-15);
        assert_eq!(two.sigma, vec![0.0; 3]);
        assert!(aggregate_district("d", "x", &[], c).is_err());
    }

    #[test]
    fn design_matrix_and_csv() {
        let c = Point::new(10.0, 20.0);
        let xs: Vec<_> = (0..3)
            .map(|i| {
                let vs = vec![vec![i as f64, 1.0], vec![2.0, i as f64 * 0.5]];
                aggregate_district(&format!("d{i}"), "x", &vs, c).unwrap()
            })
            .collect();
        let dm = build_design_matrix(&xs).unwrap();
        assert_eq!(
            dm.columns,
            ["mu_0", "mu_1", "sigma_0", "sigma_1", "p", "n", "c_x", "c_y"]
        );
        assert_eq!(dm.rows[2][5], 2.0);
        assert_eq!(dm.rows[1][6], 10.0);
        let back = parse_district_features(&district_features_to_csv(&xs).unwrap()).unwrap();
        assert_eq!(back, xs);
        assert_eq!(feature_column_names(16).len(), 36);
    }
}
