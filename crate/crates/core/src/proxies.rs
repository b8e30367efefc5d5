//! The six vitality proxies and the activity-density label per district.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, validation, Error, Result};
use crate::geo::{distance, intersection_area, voronoi_partition, BBox, Point, Polygon};
use crate::layers::{ActivityLayer, BuildingHeightTable, District, LandUseCategory, LandUseLayer};

/// Parks at or above this area (1 km²) are not small parks.
pub const SMALL_PARK_MAX_AREA: f64 = 1e6;
const MIN_PARK_DISTANCE: f64 = 1e-6;
const MIN_CELL_LAND: f64 = 1e-6;

pub const PROXY_NAMES: [&str; 6] = [
    "land_use_mix",
    "building_height",
    "small_parks",
    "block_size",
    "intersection_density",
    "anisotropicity",
];
pub const VITALITY: &str = "activity_density";

/// Normalized entropy of the three land-use shares inside the district.
pub fn land_use_mix(d: &District, lu: &LandUseLayer) -> Result<f64> {
    let dbb = d.polygon.bbox();
    let mut shares = [0.0; 3];
    for (poly, cat) in &lu.features {
        if !poly.bbox().overlaps(&dbb) {
            continue;
        }
        shares[cat.index()] += intersection_area(poly, &d.polygon);
    }
    entropy_of_areas(&shares).ok_or_else(|| {
        Error::MissingData(format!(
            "district {} has no land-use coverage",
            d.district_id
        ))
    })
}

/// −Σ P log P / log 3 over the normalized shares; `None` when all are zero.
pub fn entropy_of_areas(areas: &[f64; 3]) -> Option<f64> {
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let h: f64 = areas
        .iter()
        .map(|a| a / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Some((h / (LandUseCategory::ALL.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Centroids of parks strictly smaller than 1 km².
pub fn small_park_centroids(parks: &[Polygon]) -> Vec<Point> {
    parks
        .iter()
        .filter(|p| p.area() < SMALL_PARK_MAX_AREA)
        .filter_map(|p| p.centroid().ok())
        .collect()
}

/// Inverse mean distance from block centroids to the nearest small park.
pub fn small_parks(d: &District, parks: &[Polygon]) -> Result<f64> {
    small_parks_from_centroids(d, &small_park_centroids(parks))
}

pub fn small_parks_from_centroids(d: &District, park_centroids: &[Point]) -> Result<f64> {
    if park_centroids.is_empty() {
        return Err(Error::MissingData("no small parks in the dataset".into()));
    }
    if d.blocks.is_empty() {
        return Err(Error::MissingData(format!(
            "district {} has no blocks",
            d.district_id
        )));
    }
    let mut total = 0.0;
    for b in &d.blocks {
        let c = b.polygon.centroid()?;
        total += park_centroids
            .iter()
            .map(|&p| distance(c, p))
            .fold(f64::INFINITY, f64::min);
    }
    let mean = total / d.blocks.len() as f64;
    if mean < MIN_PARK_DISTANCE {
        warn!(
            "district {}: mean park distance {mean} m clamped",
            d.district_id
        );
    }
    Ok(1.0 / mean.max(MIN_PARK_DISTANCE))
}

/// Average floors per building.
pub fn building_height(district_id: &str, t: &BuildingHeightTable) -> Result<f64> {
    let counts = t.counts.get(district_id);
    let (mut num, mut den) = (0.0, 0.0);
    for (cat, &count) in counts.into_iter().flatten() {
        let floors = *t
            .floors
            .get(cat)
            .ok_or_else(|| format_err!("height category `{cat}` has no floors mapping"))?;
        num += count as f64 * floors as f64;
        den += count as f64;
    }
    if den == 0.0 {
        return Err(Error::MissingData(format!(
            "district {district_id} has no buildings"
        )));
    }
    Ok(num / den)
}

pub fn block_size(d: &District) -> Result<f64> {
    if d.blocks.is_empty() {
        return Err(Error::MissingData(format!(
            "district {} has no blocks",
            d.district_id
        )));
    }
    Ok(d.blocks.iter().map(|b| b.area).sum::<f64>() / d.blocks.len() as f64)
}

/// Intersections inside the district (boundary-inclusive) per square meter.
pub fn intersection_density(d: &District, intersections: &[Point]) -> f64 {
    let bb = d.polygon.bbox();
    let count = intersections
        .iter()
        .filter(|&&p| bb.contains(p) && d.polygon.contains(p))
        .count();
    count as f64 / d.polygon.area()
}

pub fn anisotropicity(d: &District) -> Result<f64> {
    if d.blocks.is_empty() {
        return Err(Error::MissingData(format!(
            "district {} has no usable blocks",
            d.district_id
        )));
    }
    Ok(d.blocks.iter().map(|b| b.phi).sum::<f64>() / d.blocks.len() as f64)
}

/// Rectangle used to clip the Voronoi partition of radio sites: the
/// bounding box of all districts and sites, grown by 10% per side.
pub fn activity_bound(districts: &[District], sites: &[Point]) -> Result<Polygon> {
    let bb = districts
        .iter()
        .map(|d| d.polygon.bbox())
        .chain(BBox::of_points(sites.iter()))
        .reduce(|a, b| a.union(&b))
        .ok_or_else(|| validation!("activity density needs districts or sites"))?;
    let bb = if bb.width() == 0.0 || bb.height() == 0.0 {
        BBox {
            min_x: bb.min_x - 1.0,
            min_y: bb.min_y - 1.0,
            max_x: bb.max_x + 1.0,
            max_y: bb.max_y + 1.0,
        }
    } else {
        bb
    };
    bb.expanded(0.1).to_polygon()
}

/// Linear map from site connection counts to district activity density:
/// `S[d] = Σ_p weights[d][p] · R[p]`, where the weight is the share of the
/// site's land (cell minus water) that falls inside the district.
pub fn activity_weights(
    districts: &[District],
    sites: &[Point],
    water: &[Polygon],
) -> Result<Vec<Vec<f64>>> {
    if sites.is_empty() {
        return Err(validation!(
            "activity density needs at least one radio site"
        ));
    }
    activity_weights_within(districts, sites, water, &activity_bound(districts, sites)?)
}

/// As [`activity_weights`], with an explicit clipping polygon.
pub fn activity_weights_within(
    districts: &[District],
    sites: &[Point],
    water: &[Polygon],
    bound: &Polygon,
) -> Result<Vec<Vec<f64>>> {
    let cells = voronoi_partition(sites, bound)?;
    let mut w = vec![vec![0.0; sites.len()]; districts.len()];
    for (p, cell) in cells.iter().enumerate() {
        let cbb = cell.cell.bbox();
        let cell_area = cell.cell.area();
        let wet: f64 = water
            .iter()
            .filter(|wp| wp.bbox().overlaps(&cbb))
            .map(|wp| intersection_area(&cell.cell, wp))
            .sum();
        let land = cell_area - wet;
        if land <= MIN_CELL_LAND {
            warn!(
                "radio site {p} at ({}, {}) has no land in its cell; skipped",
                cell.site.x, cell.site.y
            );
            continue;
        }
        for (di, d) in districts.iter().enumerate() {
            if !d.polygon.bbox().overlaps(&cbb) {
                continue;
            }
            let a = intersection_area(&cell.cell, &d.polygon);
            if a > 0.0 {
                w[di][p] = a / land;
            }
        }
    }
    Ok(w)
}

pub fn activity_density(
    districts: &[District],
    a: &ActivityLayer,
) -> Result<BTreeMap<String, f64>> {
    let points: Vec<Point> = a.sites.iter().map(|s| s.position).collect();
    let w = activity_weights(districts, &points, &a.water)?;
    Ok(weighted_sums(districts, &w, a))
}

pub fn activity_density_within(
    districts: &[District],
    a: &ActivityLayer,
    bound: &Polygon,
) -> Result<BTreeMap<String, f64>> {
    let points: Vec<Point> = a.sites.iter().map(|s| s.position).collect();
    let w = activity_weights_within(districts, &points, &a.water, bound)?;
    Ok(weighted_sums(districts, &w, a))
}

fn weighted_sums(
    districts: &[District],
    w: &[Vec<f64>],
    a: &ActivityLayer,
) -> BTreeMap<String, f64> {
    districts
        .iter()
        .zip(w)
        .map(|(d, row)| {
            let s = row
                .iter()
                .zip(&a.sites)
                .map(|(wp, site)| wp * site.connections)
                .sum();
            (d.district_id.clone(), s)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct ProxyLayers {
    pub land_use: LandUseLayer,
    pub parks: Vec<Polygon>,
    pub intersections: Vec<Point>,
    pub heights: BuildingHeightTable,
    pub activity: ActivityLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyRecord {
    pub district_id: String,
    pub land_use_mix: Option<f64>,
    pub building_height: Option<f64>,
    pub small_parks: Option<f64>,
    pub block_size: Option<f64>,
    pub intersection_density: Option<f64>,
    pub anisotropicity: Option<f64>,
    pub activity_density: Option<f64>,
}

impl ProxyRecord {
    pub fn empty(district_id: &str) -> Self {
        ProxyRecord {
            district_id: district_id.to_string(),
            land_use_mix: None,
            building_height: None,
            small_parks: None,
            block_size: None,
            intersection_density: None,
            anisotropicity: None,
            activity_density: None,
        }
    }

    /// The six proxies in canonical order.
    pub fn proxies(&self) -> [Option<f64>; 6] {
        [
            self.land_use_mix,
            self.building_height,
            self.small_parks,
            self.block_size,
            self.intersection_density,
            self.anisotropicity,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            VITALITY => self.activity_density,
            _ => PROXY_NAMES
                .iter()
                .position(|n| *n == name)
                .and_then(|i| self.proxies()[i]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyIssue {
    pub district_id: String,
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProxyReport {
    pub records: Vec<ProxyRecord>,
    pub issues: Vec<ProxyIssue>,
}

/// Computes every proxy for every district, collecting per-district
/// failures instead of aborting.
pub fn compute_all(districts: &[District], layers: &ProxyLayers) -> ProxyReport {
    let mut report = ProxyReport::default();
    let parks = small_park_centroids(&layers.parks);
    let activity = activity_density(districts, &layers.activity);
    if let Err(e) = &activity {
        warn!("activity density unavailable: {e}");
    }
    for d in districts {
        let id = d.district_id.as_str();
        let mut rec = ProxyRecord::empty(id);
        let mut note = |field: &'static str, r: Result<f64>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                report.issues.push(ProxyIssue {
                    district_id: id.to_string(),
                    field,
                    message: e.to_string(),
                });
                None
            }
        };
        rec.land_use_mix = note("land_use_mix", land_use_mix(d, &layers.land_use));
        rec.building_height = note("building_height", building_height(id, &layers.heights));
        rec.small_parks = note("small_parks", small_parks_from_centroids(d, &parks));
        rec.block_size = note("block_size", block_size(d));
        rec.intersection_density = note(
            "intersection_density",
            Ok(intersection_density(d, &layers.intersections)),
        );
        rec.anisotropicity = note("anisotropicity", anisotropicity(d));
        rec.activity_density = note(
            VITALITY,
            match &activity {
                Ok(m) => Ok(m[id]),
                Err(e) => Err(Error::MissingData(e.to_string())),
            },
        );
        report.records.push(rec);
    }
    report
}

const CSV_HEADER: [&str; 8] = [
    "district_id",
    "land_use_mix",
    "building_height",
    "small_parks",
    "block_size",
    "intersection_density",
    "anisotropicity",
    "activity_density",
];

/// Raw proxy values; missing values are empty fields.
pub fn proxies_to_csv(records: &[ProxyRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in records {
        let mut row = vec![r.district_id.clone()];
        row.extend(
            r.proxies()
                .iter()
                .chain([&r.activity_density])
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
        );
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn parse_proxies(text: &str) -> Result<Vec<ProxyRecord>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| format_err!("proxy header: {e}"))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(format_err!("proxy CSV has unexpected header"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err!("proxy row {}: {e}", i + 1))?;
        let mut vals = [None; 7];
        for (k, slot) in vals.iter_mut().enumerate() {
            let s = &rec[k + 1];
            if s.is_empty() {
                continue;
            }
            let v: f64 = s
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| format_err!("proxy row {}: bad value `{s}`", i + 1))?;
            *slot = Some(v);
        }
        out.push(ProxyRecord {
            district_id: rec[0].to_string(),
            land_use_mix: vals[0],
            building_height: vals[1],
            small_parks: vals[2],
            block_size: vals[3],
            intersection_density: vals[4],
            anisotropicity: vals[5],
            activity_density: vals[6],
        });
    }
    Ok(out)
}
