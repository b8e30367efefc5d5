//! Synthetic cities with planted proxy–vitality relationships.
//!
//! Districts sit on a rectilinear grid whose cells are whole raster tiles,
//! so every imagelet falls inside exactly one district. Each district is cut
//! into a regular grid of rectangular blocks, which keeps every proxy
//! checkable in closed form. Radio-site counts are solved so that activity
//! density equals the planted linear function of the proxies plus noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, validation, Error, Result};
use crate::geo::{Point, Polygon};
use crate::geojson::{write_feature_collection, Feature, Geometry};
use crate::layers::{
    ActivityLayer, Block, BuildingHeightTable, District, LandUseCategory, LandUseLayer, RadioSite,
};
use crate::poi::{PoiCategory, PoiLayer};
use crate::proxies::{activity_weights, entropy_of_areas, ProxyRecord, PROXY_NAMES};
use crate::raster::{write_geotiff, GeoRaster, GeoTransform, TILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_cities: usize,
    pub districts_x: usize,
    pub districts_y: usize,
    /// District side lengths, in raster tiles, drawn per grid column/row.
    pub district_tiles: Vec<usize>,
    /// Blocks per tile side are drawn from this inclusive range.
    pub block_divisions: [usize; 2],
    /// Largest block aspect ratio; 1 gives square blocks everywhere.
    pub max_aspect: f64,
    pub pixel_size: f64,
    pub park_probability: f64,
    /// Planted weights on the standardized proxies.
    pub weights: BTreeMap<String, f64>,
    /// Standard deviation of the planted signal relative to the mean activity.
    pub signal_scale: f64,
    /// Relative noise standard deviation; ignored when `target_r2` is set.
    pub noise_std: f64,
    /// Noise chosen so the signal explains this share of the variance.
    pub target_r2: Option<f64>,
    pub base_activity: f64,
    pub water: bool,
    /// Jittered quadrilateral blocks, for geometry stress tests.
    pub irregular: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let weights = [
            ("land_use_mix", 0.2),
            ("building_height", 0.2),
            ("small_parks", 0.15),
            ("block_size", -0.5),
            ("intersection_density", 0.7),
            ("anisotropicity", 0.1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        SynthSpec {
            seed: 7,
            n_cities: 1,
            districts_x: 12,
            districts_y: 10,
            district_tiles: vec![2, 3],
            block_divisions: [1, 4],
            max_aspect: 3.0,
            pixel_size: 5.0,
            park_probability: 0.5,
            weights,
            signal_scale: 0.1,
            noise_std: 0.0,
            target_r2: None,
            base_activity: 10_000.0,
            water: true,
            irregular: false,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SynthSpec = toml::from_str(text).map_err(|e| format_err!("synth spec: {e}"))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_cities == 0 || self.districts_x == 0 || self.districts_y == 0 {
            errs.push("n_cities, districts_x and districts_y must be positive".to_string());
        }
        let total = self
            .n_cities
            .checked_mul(self.districts_x)
            .and_then(|n| n.checked_mul(self.districts_y));
        if total.is_none_or(|n| n > 100_000) {
            errs.push("too many districts".to_string());
        }
        if self.district_tiles.is_empty() || self.district_tiles.iter().any(|&t| t == 0 || t > 16) {
            errs.push("district_tiles must list sizes in 1..=16".to_string());
        }
        let [lo, hi] = self.block_divisions;
        if lo == 0 || lo > hi || hi > 16 {
            errs.push("block_divisions must satisfy 1 <= min <= max <= 16".to_string());
        }
        if !(self.max_aspect >= 1.0) || !self.max_aspect.is_finite() {
            errs.push("max_aspect must be >= 1".to_string());
        }
        if !(self.pixel_size > 0.0) || !self.pixel_size.is_finite() {
            errs.push("pixel_size must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.park_probability) {
            errs.push("park_probability must lie in [0, 1]".to_string());
        }
        for (k, v) in &self.weights {
            if !PROXY_NAMES.contains(&k.as_str()) {
                errs.push(format!("unknown proxy `{k}` in weights"));
            }
            if !v.is_finite() {
                errs.push(format!("weight for `{k}` must be finite"));
            }
        }
        if !(self.signal_scale >= 0.0) || !self.signal_scale.is_finite() {
            errs.push("signal_scale must be non-negative".to_string());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            errs.push("noise_std must be non-negative".to_string());
        }
        if let Some(r) = self.target_r2 {
            if !(r > 0.0 && r <= 1.0) {
                errs.push("target_r2 must lie in (0, 1]".to_string());
            }
        }
        if !(self.base_activity > 0.0) || !self.base_activity.is_finite() {
            errs.push("base_activity must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs.join("; ")))
        }
    }

    fn tile_side(&self) -> f64 {
        TILE as f64 * self.pixel_size
    }
}

/// The generating linear function: S = intercept + Σ coef·proxy + noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub intercept: f64,
    pub coefficients: BTreeMap<String, f64>,
    /// Absolute standard deviation of the additive noise.
    pub noise_std: f64,
}

impl Planted {
    pub fn evaluate(&self, r: &ProxyRecord) -> Result<f64> {
        let mut s = self.intercept;
        for (k, c) in &self.coefficients {
            let v = r
                .get(k)
                .ok_or_else(|| validation!("district {} lacks `{k}`", r.district_id))?;
            s += c * v;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCity {
    pub name: String,
    /// Districts with their blocks attached.
    pub districts: Vec<District>,
    pub land_use: LandUseLayer,
    pub parks: Vec<Polygon>,
    pub intersections: Vec<Point>,
    pub heights: BuildingHeightTable,
    pub activity: ActivityLayer,
    pub pois: PoiLayer,
    pub raster: GeoRaster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub spec: SynthSpec,
    pub cities: Vec<SynthCity>,
    /// Ground-truth proxies and activity density, with the district's city.
    pub truth: Vec<(String, ProxyRecord)>,
    pub planted: Planted,
}

const HEIGHT_CLASSES: [(&str, u32); 3] = [("low", 2), ("medium", 5), ("high", 10)];

struct DistrictPlan {
    id: String,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    /// Blocks along x and y.
    bx: usize,
    by: usize,
    /// Land-use strips west to east: category and width share.
    strips: Vec<(LandUseCategory, f64)>,
    park: Option<(Point, f64)>,
    counts: BTreeMap<String, u64>,
    mean_floors: f64,
    /// (bx+1)·(by+1) grid nodes, row-major from the south-west corner.
    nodes: Vec<Point>,
}

impl DistrictPlan {
    fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    fn node(&self, i: usize, j: usize) -> Point {
        self.nodes[j * (self.bx + 1) + i]
    }

    fn block_polygon(&self, i: usize, j: usize) -> Result<Polygon> {
        Polygon::from_vertices(&[
            self.node(i, j),
            self.node(i + 1, j),
            self.node(i + 1, j + 1),
            self.node(i, j + 1),
        ])
    }

    fn strip_bounds(&self) -> Vec<(LandUseCategory, f64, f64)> {
        let mut out = Vec::new();
        let mut acc = 0.0;
        for (k, &(c, s)) in self.strips.iter().enumerate() {
            let a = self.x0 + self.width() * acc;
            acc += s;
            let b = if k + 1 == self.strips.len() {
                self.x1
            } else {
                self.x0 + self.width() * acc
            };
            out.push((c, a, b));
        }
        out
    }
}

fn boundaries(start: f64, sizes: &[usize], side: f64) -> Vec<f64> {
    let mut out = vec![start];
    let mut acc = 0usize;
    for &s in sizes {
        acc += s;
        out.push(start + acc as f64 * side);
    }
    out
}

fn plan_city(
    spec: &SynthSpec,
    name: &str,
    origin: Point,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DistrictPlan>> {
    let t = spec.tile_side();
    let cols: Vec<usize> = (0..spec.districts_x)
        .map(|_| *spec.district_tiles.choose(rng).expect("non-empty"))
        .collect();
    let rows: Vec<usize> = (0..spec.districts_y)
        .map(|_| *spec.district_tiles.choose(rng).expect("non-empty"))
        .collect();
    let xs = boundaries(origin.x, &cols, t);
    let ys = boundaries(origin.y, &rows, t);
    let [kmin, kmax] = spec.block_divisions;
    let mut plans = Vec::new();
    for j in 0..spec.districts_y {
        for i in 0..spec.districts_x {
            let kx = rng.random_range(kmin..=kmax);
            let allowed: Vec<usize> = (kmin..=kmax)
                .filter(|&k| (k.max(kx) as f64 / k.min(kx) as f64) <= spec.max_aspect + 1e-12)
                .collect();
            let ky = *allowed.choose(rng).expect("kx itself is allowed");
            let (bx, by) = (cols[i] * kx, rows[j] * ky);
            let (x0, x1, y0, y1) = (xs[i], xs[i + 1], ys[j], ys[j + 1]);
            let (w, h) = (x1 - x0, y1 - y0);

            let mut nodes = Vec::with_capacity((bx + 1) * (by + 1));
            let jitter = if spec.irregular {
                0.2 * (w / bx as f64).min(h / by as f64)
            } else {
                0.0
            };
            for nj in 0..=by {
                for ni in 0..=bx {
                    let mut p = Point::new(
                        x0 + w * ni as f64 / bx as f64,
                        y0 + h * nj as f64 / by as f64,
                    );
                    if jitter > 0.0 && ni > 0 && ni < bx && nj > 0 && nj < by {
                        p = Point::new(
                            p.x + rng.random_range(-jitter..jitter),
                            p.y + rng.random_range(-jitter..jitter),
                        );
                    }
                    nodes.push(p);
                }
            }

            let mut cats = LandUseCategory::ALL;
            cats.shuffle(rng);
            let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let strips = cats
                .iter()
                .zip(&raw)
                .map(|(&c, &r)| (c, r / total))
                .collect();

            let park = if rng.random_bool(spec.park_probability) {
                let half = 0.08 * w.min(h);
                let cx = rng.random_range(x0 + 2.0 * half..x1 - 2.0 * half);
                let cy = rng.random_range(y0 + 2.0 * half..y1 - 2.0 * half);
                Some((Point::new(cx, cy), half))
            } else {
                None
            };

            let level: f64 = rng.random();
            let buildings = (bx * by * rng.random_range(2..6)) as f64;
            let probs = [
                (1.0 - level).powi(2),
                2.0 * level * (1.0 - level),
                level * level,
            ];
            let mut counts = BTreeMap::new();
            for ((cls, _), p) in HEIGHT_CLASSES.iter().zip(probs) {
                let c = (buildings * p).round() as u64;
                if c > 0 {
                    counts.insert(cls.to_string(), c);
                }
            }
            if counts.is_empty() {
                counts.insert("low".to_string(), 1);
            }
            let floors: BTreeMap<&str, u32> = HEIGHT_CLASSES.into_iter().collect();
            let den: u64 = counts.values().sum();
            let num: u64 = counts
                .iter()
                .map(|(k, c)| c * u64::from(floors[k.as_str()]))
                .sum();

            plans.push(DistrictPlan {
                id: format!("{name}-{j:02}-{i:02}"),
                x0,
                y0,
                x1,
                y1,
                bx,
                by,
                strips,
                park,
                counts,
                mean_floors: num as f64 / den as f64,
                nodes,
            });
        }
    }
    if plans.iter().all(|p| p.park.is_none()) {
        let p = &mut plans[0];
        let half = 0.08 * p.width().min(p.height());
        p.park = Some((Point::new(0.5 * (p.x0 + p.x1), 0.5 * (p.y0 + p.y1)), half));
    }
    Ok(plans)
}

fn block_center(p: &DistrictPlan, i: usize, j: usize) -> Result<Point> {
    if p.nodes.len() == (p.bx + 1) * (p.by + 1) && !is_regular(p) {
        return p.block_polygon(i, j)?.centroid();
    }
    let (w, h) = (p.width() / p.bx as f64, p.height() / p.by as f64);
    Ok(Point::new(
        p.x0 + w * (i as f64 + 0.5),
        p.y0 + h * (j as f64 + 0.5),
    ))
}

fn is_regular(p: &DistrictPlan) -> bool {
    (0..=p.by).all(|j| {
        (0..=p.bx).all(|i| {
            let n = p.node(i, j);
            n.x == p.x0 + p.width() * i as f64 / p.bx as f64
                && n.y == p.y0 + p.height() * j as f64 / p.by as f64
        })
    })
}

fn truth_for(p: &DistrictPlan, blocks: &[Block], parks: &[Point]) -> Result<ProxyRecord> {
    let area = p.width() * p.height();
    let mut shares = [0.0; 3];
    for &(c, s) in &p.strips {
        shares[c.index()] += s * area;
    }
    let mut dist = 0.0;
    for j in 0..p.by {
        for i in 0..p.bx {
            let c = block_center(p, i, j)?;
            dist += parks
                .iter()
                .map(|&q| crate::geo::distance(c, q))
                .fold(f64::INFINITY, f64::min);
        }
    }
    let n_blocks = (p.bx * p.by) as f64;
    let (w, h) = (p.width() / p.bx as f64, p.height() / p.by as f64);
    let phi = if is_regular(p) {
        4.0 * w * h / (std::f64::consts::PI * (w * w + h * h))
    } else {
        blocks.iter().map(|b| b.phi).sum::<f64>() / n_blocks
    };
    let mut r = ProxyRecord::empty(&p.id);
    r.land_use_mix = entropy_of_areas(&shares);
    r.building_height = Some(p.mean_floors);
    r.small_parks = Some(1.0 / (dist / n_blocks));
    r.block_size = Some(area / n_blocks);
    r.intersection_density = Some(((p.bx - 1) * (p.by - 1)) as f64 / area);
    r.anisotropicity = Some(phi);
    Ok(r)
}

fn color(c: LandUseCategory) -> [f64; 3] {
    match c {
        LandUseCategory::Residential => [185.0, 115.0, 95.0],
        LandUseCategory::CommercialIndustrialInstitutional => [140.0, 145.0, 165.0],
        LandUseCategory::RecreationalParksWater => [105.0, 165.0, 95.0],
    }
}

const SOIL: [f64; 3] = [160.0, 150.0, 120.0];
/// North-south avenues are wider and darker than east-west streets, so
/// pixel statistics see the two block counts separately.
const AVENUE: [f64; 3] = [60.0, 60.0, 66.0];
const STREET: [f64; 3] = [200.0, 198.0, 190.0];
/// Crosswalk markings at every intersection.
const CROSSING: [f64; 3] = [250.0, 250.0, 250.0];
const PARK: [f64; 3] = [50.0, 125.0, 55.0];
const WATER: [f64; 3] = [35.0, 65.0, 115.0];

struct Canvas<'a> {
    plans: &'a [DistrictPlan],
    xs: Vec<f64>,
    ys: Vec<f64>,
    nx: usize,
    street_half: f64,
    water: Option<[f64; 4]>,
}

impl Canvas<'_> {
    fn base(&self, x: f64, y: f64) -> [f64; 3] {
        if let Some([a, b, c, d]) = self.water {
            if x >= a && x <= c && y >= b && y <= d {
                return WATER;
            }
        }
        let (Some(i), Some(j)) = (locate(&self.xs, x), locate(&self.ys, y)) else {
            return SOIL;
        };
        let p = &self.plans[j * self.nx + i];
        let (w, h) = (p.width() / p.bx as f64, p.height() / p.by as f64);
        let (fx, fy) = ((x - p.x0) / w, (y - p.y0) / h);
        let near = |f: f64, side: f64, half: f64| (f - f.round()).abs() * side < half;
        if is_regular(p) {
            let cross = 3.0 * self.street_half;
            if near(fx, w, cross) && near(fy, h, cross) {
                return CROSSING;
            }
            if near(fx, w, 2.0 * self.street_half) {
                return AVENUE;
            }
            if near(fy, h, self.street_half) {
                return STREET;
            }
        } else if x - p.x0 < self.street_half
            || p.x1 - x < self.street_half
            || y - p.y0 < self.street_half
            || p.y1 - y < self.street_half
        {
            return STREET;
        }
        if let Some((c, half)) = p.park {
            if (x - c.x).abs() <= half && (y - c.y).abs() <= half {
                return PARK;
            }
        }
        let cat = p
            .strip_bounds()
            .into_iter()
            .find(|&(_, a, b)| x >= a && x < b)
            .map_or(LandUseCategory::Residential, |(c, _, _)| c);
        // Taller districts render darker.
        let shade = 1.2 - 0.06 * (p.mean_floors - 2.0);
        color(cat).map(|v| v * shade)
    }
}

fn locate(bounds: &[f64], v: f64) -> Option<usize> {
    if v < bounds[0] || v >= *bounds.last().expect("non-empty") {
        return None;
    }
    Some(bounds.partition_point(|&b| b <= v) - 1)
}

fn render(
    spec: &SynthSpec,
    plans: &[DistrictPlan],
    xs: &[f64],
    ys: &[f64],
    water: Option<[f64; 4]>,
    rng: &mut ChaCha8Rng,
) -> Result<GeoRaster> {
    let t = spec.tile_side();
    let ps = spec.pixel_size;
    let (ox, oy) = (xs[0] - t, ys[ys.len() - 1] + t);
    let width = ((xs[xs.len() - 1] - xs[0] + 2.0 * t) / ps).round() as usize;
    let height = ((ys[ys.len() - 1] - ys[0] + 2.0 * t) / ps).round() as usize;
    let canvas = Canvas {
        plans,
        xs: xs.to_vec(),
        ys: ys.to_vec(),
        nx: xs.len() - 1,
        street_half: ps,
        water,
    };
    let mut pixels = Vec::with_capacity(width * height * 3);
    for row in 0..height {
        let y = oy - (row as f64 + 0.5) * ps;
        for col in 0..width {
            let x = ox + (col as f64 + 0.5) * ps;
            for v in canvas.base(x, y) {
                let noisy = v + rng.random_range(-12.0..12.0);
                pixels.push(noisy.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    GeoRaster::new(
        width,
        height,
        pixels,
        GeoTransform {
            origin_x: ox,
            origin_y: oy,
            pixel_size_x: ps,
            pixel_size_y: ps,
        },
    )
}

struct CityDraft {
    name: String,
    plans: Vec<DistrictPlan>,
    city: SynthCity,
    sites: Vec<Point>,
    truth: Vec<ProxyRecord>,
}

fn build_city(spec: &SynthSpec, index: usize, rng: &mut ChaCha8Rng) -> Result<CityDraft> {
    let name = format!("city{index}");
    // Each city lives in its own local projected frame, as real cities in
    // separate projections do, so their coordinate ranges overlap.
    let origin = Point::new(500_000.0, 5_000_000.0);
    let plans = plan_city(spec, &name, origin, rng)?;
    let t = spec.tile_side();
    let xs: Vec<f64> = std::iter::once(plans[0].x0)
        .chain(plans[..spec.districts_x].iter().map(|p| p.x1))
        .collect();
    let ys: Vec<f64> = std::iter::once(plans[0].y0)
        .chain((0..spec.districts_y).map(|j| plans[j * spec.districts_x].y1))
        .collect();

    let mut districts = Vec::with_capacity(plans.len());
    let mut land_use = LandUseLayer::default();
    let mut parks = Vec::new();
    let mut park_centers = Vec::new();
    let mut intersections = Vec::new();
    let mut counts = BTreeMap::new();
    let mut sites = Vec::new();
    for p in &plans {
        let mut d = District::new(
            p.id.clone(),
            name.clone(),
            Polygon::rect(p.x0, p.y0, p.x1, p.y1)?,
        );
        for j in 0..p.by {
            for i in 0..p.bx {
                d.blocks.push(Block::new(p.block_polygon(i, j)?)?);
            }
        }
        districts.push(d);
        for (c, a, b) in p.strip_bounds() {
            land_use
                .features
                .push((Polygon::rect(a, p.y0, b, p.y1)?, c));
        }
        if let Some((c, half)) = p.park {
            parks.push(Polygon::rect(
                c.x - half,
                c.y - half,
                c.x + half,
                c.y + half,
            )?);
            park_centers.push(c);
        }
        for nj in 1..p.by {
            for ni in 1..p.bx {
                intersections.push(p.node(ni, nj));
            }
        }
        counts.insert(p.id.clone(), p.counts.clone());
        // One radio site at the center of every tile-sized cell.
        let (cx, cy) = (
            (p.width() / t).round() as usize,
            (p.height() / t).round() as usize,
        );
        for j in 0..cy {
            for i in 0..cx {
                sites.push(Point::new(
                    p.x0 + t * (i as f64 + 0.5),
                    p.y0 + t * (j as f64 + 0.5),
                ));
            }
        }
    }
    let truth = plans
        .iter()
        .zip(&districts)
        .map(|(p, d)| truth_for(p, &d.blocks, &park_centers))
        .collect::<Result<Vec<_>>>()?;

    let (xe, y0, ye) = (xs[xs.len() - 1], ys[0], ys[ys.len() - 1]);
    let water_rect = spec
        .water
        .then(|| [xe + 0.5 * t, y0 - 10.0 * t, xe + 20.0 * t, ye + 10.0 * t]);
    let water: Vec<Polygon> = water_rect
        .iter()
        .map(|&[a, b, c, d]| Polygon::rect(a, b, c, d))
        .collect::<Result<_>>()?;
    let raster = render(spec, &plans, &xs, &ys, water_rect, rng)?;

    let floors = HEIGHT_CLASSES
        .iter()
        .map(|(k, f)| (k.to_string(), *f))
        .collect();
    let city = SynthCity {
        name: name.clone(),
        districts,
        land_use,
        parks,
        intersections,
        heights: BuildingHeightTable { counts, floors },
        activity: ActivityLayer {
            sites: Vec::new(),
            water,
        },
        pois: PoiLayer::default(),
        raster,
    };
    Ok(CityDraft {
        name,
        plans,
        city,
        sites,
        truth,
    })
}

fn population_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Plants the linear function over all districts of all cities.
fn plant(spec: &SynthSpec, truth: &[&ProxyRecord]) -> Planted {
    let mut coefficients = BTreeMap::new();
    let mut intercept = spec.base_activity;
    let mut raw = Vec::new();
    for name in PROXY_NAMES {
        let w = spec.weights.get(name).copied().unwrap_or(0.0);
        let v: Vec<f64> = truth
            .iter()
            .map(|r| r.get(name).expect("truth is complete"))
            .collect();
        let (mean, std) = population_stats(&v);
        let slope = if std > 0.0 { w / std } else { 0.0 };
        raw.push((name, mean, slope));
    }
    // Scale the standardized signal to the requested relative std.
    let signal: Vec<f64> = truth
        .iter()
        .map(|r| {
            raw.iter()
                .map(|(n, m, s)| s * (r.get(n).expect("complete") - m))
                .sum()
        })
        .collect();
    let (_, sstd) = population_stats(&signal);
    let k = if sstd > 0.0 {
        spec.signal_scale / sstd
    } else {
        0.0
    };
    for (name, mean, slope) in raw {
        let c = spec.base_activity * k * slope;
        intercept -= c * mean;
        coefficients.insert(name.to_string(), c);
    }
    let rel_noise = match spec.target_r2 {
        Some(r2) => spec.signal_scale * ((1.0 - r2) / r2).sqrt(),
        None => spec.noise_std,
    };
    Planted {
        intercept,
        coefficients,
        noise_std: spec.base_activity * rel_noise,
    }
}

/// Radio-site counts reproducing the target activity exactly: every site
/// belongs to one district, and a district's sites share one count.
fn solve_connections(
    districts: &[District],
    sites: &[Point],
    water: &[Polygon],
    target: &[f64],
) -> Result<Vec<f64>> {
    let m = activity_weights(districts, sites, water)?;
    let mut owner = vec![usize::MAX; sites.len()];
    for (p, o) in owner.iter_mut().enumerate() {
        let (best, w) =
            m.iter()
                .enumerate()
                .map(|(d, row)| (d, row[p]))
                .fold(
                    (usize::MAX, 0.0),
                    |acc, x| if x.1 > acc.1 { x } else { acc },
                );
        if w > 0.0 {
            *o = best;
        }
    }
    let mut r = vec![0.0; sites.len()];
    for (d, row) in m.iter().enumerate() {
        let own: f64 = (0..sites.len())
            .filter(|&p| owner[p] == d)
            .map(|p| row[p])
            .sum();
        if !(own > 0.0) {
            return Err(validation!(
                "district {} has no radio-site coverage",
                districts[d].district_id
            ));
        }
        for p in (0..sites.len()).filter(|&p| owner[p] == d) {
            r[p] = target[d] / own;
        }
    }
    // Cross-district slivers from floating-point bisectors are tiny; one
    // linear solve removes them when present.
    let ms = DMatrix::from_fn(districts.len(), sites.len(), |d, p| m[d][p]);
    let resid = &DVector::from_column_slice(target) - &ms * DVector::from_column_slice(&r);
    if resid.amax() > 1e-12 * target.iter().fold(0.0f64, |a, b| a.max(b.abs())) {
        let scale: Vec<f64> = (0..districts.len())
            .map(|d| {
                (0..sites.len())
                    .filter(|&p| owner[p] == d)
                    .map(|p| m[d][p])
                    .sum()
            })
            .collect();
        let a = DMatrix::from_fn(districts.len(), districts.len(), |d, e| {
            (0..sites.len())
                .filter(|&p| owner[p] == e)
                .map(|p| m[d][p])
                .sum::<f64>()
                / scale[e]
        });
        let u = a
            .lu()
            .solve(&DVector::from_column_slice(target))
            .ok_or_else(|| Error::Singular("activity system is singular".into()))?;
        for (p, rp) in r.iter_mut().enumerate() {
            *rp = u[owner[p]] / scale[owner[p]];
        }
    }
    if r.iter().any(|v| !(*v >= 0.0)) {
        return Err(validation!("negative connection count"));
    }
    Ok(r)
}

fn place_pois(
    spec: &SynthSpec,
    plans: &[DistrictPlan],
    truth: &[ProxyRecord],
    rng: &mut ChaCha8Rng,
) -> Result<PoiLayer> {
    let mut points = Vec::new();
    for (p, r) in plans.iter().zip(truth) {
        let km2 = p.width() * p.height() / 1e6;
        let vitality = r.activity_density.expect("activity planted") / spec.base_activity;
        let inter = r.intersection_density.expect("complete") * p.width() * p.height();
        let mix = r.land_use_mix.expect("complete");
        let rates = [
            (
                PoiCategory::Sustenance,
                25.0 * km2 * vitality.max(0.0).powi(2),
            ),
            (PoiCategory::Transportation, 0.05 * inter + 0.5),
            (PoiCategory::Entertainment, 8.0 * km2 * (0.5 + mix)),
        ];
        for (cat, lambda) in rates {
            let n = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| validation!("PoI rate: {e}"))?
                    .sample(rng) as usize
            } else {
                0
            };
            for _ in 0..n {
                let q = Point::new(rng.random_range(p.x0..p.x1), rng.random_range(p.y0..p.y1));
                points.push((q, cat));
            }
        }
    }
    Ok(PoiLayer { points })
}

/// Residualizes a standard-normal draw on the intercept and the proxies,
/// then scales it so the proxies explain exactly `r2` of the variance.
fn calibrated_noise(draw: Vec<f64>, design: &[Vec<f64>], signal: &[f64], r2: f64) -> Vec<f64> {
    let n = draw.len();
    let p = design.first().map_or(0, Vec::len);
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { design[i][j - 1] });
    // Column scaling keeps the QR well conditioned for proxies of very
    // different magnitudes.
    let scale: Vec<f64> = (0..=p)
        .map(|j| x.column(j).amax().max(f64::MIN_POSITIVE))
        .collect();
    let xs = DMatrix::from_fn(n, p + 1, |i, j| x[(i, j)] / scale[j]);
    let q = xs.qr().q();
    let e = DVector::from_vec(draw);
    let resid = &e - &q * (q.transpose() * &e);
    let mean = signal.iter().sum::<f64>() / n as f64;
    let ss_signal: f64 = signal.iter().map(|s| (s - mean) * (s - mean)).sum();
    let ss_noise = resid.norm_squared();
    if ss_noise == 0.0 || r2 >= 1.0 {
        return vec![0.0; n];
    }
    let k = (ss_signal * (1.0 - r2) / r2 / ss_noise).sqrt();
    resid.iter().map(|v| v * k).collect()
}

fn city_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate(spec: &SynthSpec) -> Result<SynthBundle> {
    spec.validate()?;
    let mut drafts = (0..spec.n_cities)
        .map(|c| build_city(spec, c, &mut city_rng(spec.seed, c as u64 + 1)))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&ProxyRecord> = drafts.iter().flat_map(|d| d.truth.iter()).collect();
    let planted = plant(spec, &all);
    let signal: Vec<Vec<f64>> = drafts
        .iter()
        .map(|d| {
            d.truth
                .iter()
                .map(|r| planted.evaluate(r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut noise_rng = city_rng(spec.seed, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let design: Vec<Vec<f64>> = all
        .iter()
        .map(|r| {
            r.proxies()
                .iter()
                .map(|v| v.expect("truth is complete"))
                .collect()
        })
        .collect();
    let flat_signal: Vec<f64> = signal.iter().flatten().copied().collect();
    let mut attempt = 0;
    let targets = loop {
        attempt += 1;
        let draw: Vec<f64> = (0..flat_signal.len())
            .map(|_| normal.sample(&mut noise_rng))
            .collect();
        let noise = match spec.target_r2 {
            Some(r2) => calibrated_noise(draw, &design, &flat_signal, r2),
            None => draw.into_iter().map(|e| e * planted.noise_std).collect(),
        };
        let flat: Vec<f64> = flat_signal.iter().zip(&noise).map(|(s, e)| s + e).collect();
        if flat.iter().all(|&v| v > 0.0) {
            let mut it = flat.into_iter();
            break signal
                .iter()
                .map(|s| it.by_ref().take(s.len()).collect::<Vec<f64>>())
                .collect::<Vec<_>>();
        }
        if attempt >= 100 {
            return Err(validation!(
                "no positive activity draw in 100 attempts; lower the noise or raise base_activity"
            ));
        }
    };

    let mut truth = Vec::new();
    for ((draft, target), c) in drafts.iter_mut().zip(&targets).zip(0u64..) {
        let r = solve_connections(
            &draft.city.districts,
            &draft.sites,
            &draft.city.activity.water,
            target,
        )?;
        draft.city.activity.sites = draft
            .sites
            .iter()
            .zip(r)
            .map(|(&position, connections)| RadioSite {
                position,
                connections,
            })
            .collect();
        for (rec, &s) in draft.truth.iter_mut().zip(target) {
            rec.activity_density = Some(s);
        }
        let mut rng = city_rng(spec.seed, 1000 + c);
        draft.city.pois = place_pois(spec, &draft.plans, &draft.truth, &mut rng)?;
        truth.extend(draft.truth.iter().map(|r| (draft.name.clone(), r.clone())));
    }
    Ok(SynthBundle {
        spec: spec.clone(),
        cities: drafts.into_iter().map(|d| d.city).collect(),
        truth,
        planted,
    })
}

pub fn truth_to_csv(truth: &[(String, ProxyRecord)]) -> String {
    let mut out = String::from("district_id,city");
    for n in PROXY_NAMES {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",activity_density\n");
    for (city, r) in truth {
        out.push_str(&format!("{},{city}", r.district_id));
        for v in r
            .proxies()
            .iter()
            .chain(std::iter::once(&r.activity_density))
        {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// File names of one city's layers inside the bundle.
pub const LAYER_FILES: [(&str, &str); 11] = [
    ("raster", "raster.tif"),
    ("districts", "districts.geojson"),
    ("blocks", "blocks.geojson"),
    ("land_use", "land_use.geojson"),
    ("parks", "parks.geojson"),
    ("intersections", "intersections.geojson"),
    ("radio_sites", "radio_sites.geojson"),
    ("water", "water.geojson"),
    ("height_counts", "height_counts.csv"),
    ("height_floors", "height_floors.csv"),
    ("pois", "pois.geojson"),
];

fn polygon_features(ps: &[Polygon]) -> Vec<Feature> {
    ps.iter()
        .map(|p| Feature::new(Geometry::Polygon(p.clone())))
        .collect()
}

fn write_city(c: &SynthCity, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_geotiff(&dir.join("raster.tif"), &c.raster)?;
    let districts: Vec<Feature> = c
        .districts
        .iter()
        .map(|d| {
            Feature::new(Geometry::Polygon(d.polygon.clone()))
                .with("district_id", d.district_id.as_str())
                .with("city", d.city.as_str())
        })
        .collect();
    write_feature_collection(&dir.join("districts.geojson"), &districts)?;
    let blocks: Vec<Feature> = c
        .districts
        .iter()
        .flat_map(|d| {
            d.blocks.iter().map(|b| {
                Feature::new(Geometry::Polygon(b.polygon.clone()))
                    .with("district_id", d.district_id.as_str())
            })
        })
        .collect();
    write_feature_collection(&dir.join("blocks.geojson"), &blocks)?;
    let lu: Vec<Feature> = c
        .land_use
        .features
        .iter()
        .map(|(p, cat)| Feature::new(Geometry::Polygon(p.clone())).with("category", cat.as_str()))
        .collect();
    write_feature_collection(&dir.join("land_use.geojson"), &lu)?;
    write_feature_collection(&dir.join("parks.geojson"), &polygon_features(&c.parks))?;
    let inter: Vec<Feature> = c
        .intersections
        .iter()
        .map(|&p| Feature::new(Geometry::Point(p)))
        .collect();
    write_feature_collection(&dir.join("intersections.geojson"), &inter)?;
    let sites: Vec<Feature> = c
        .activity
        .sites
        .iter()
        .map(|s| Feature::new(Geometry::Point(s.position)).with("connections", s.connections))
        .collect();
    write_feature_collection(&dir.join("radio_sites.geojson"), &sites)?;
    write_feature_collection(
        &dir.join("water.geojson"),
        &polygon_features(&c.activity.water),
    )?;
    let mut counts = String::from("district_id,height_category,count\n");
    for (d, m) in &c.heights.counts {
        for (k, n) in m {
            counts.push_str(&format!("{d},{k},{n}\n"));
        }
    }
    write(&dir.join("height_counts.csv"), &counts)?;
    let mut floors = String::from("height_category,floors\n");
    for (k, f) in &c.heights.floors {
        floors.push_str(&format!("{k},{f}\n"));
    }
    write(&dir.join("height_floors.csv"), &floors)?;
    let pois: Vec<Feature> = c
        .pois
        .points
        .iter()
        .map(|(p, cat)| Feature::new(Geometry::Point(*p)).with("category", cat.as_str()))
        .collect();
    write_feature_collection(&dir.join("pois.geojson"), &pois)
}

/// A pipeline configuration pointing at the bundle's layers.
pub fn pipeline_config(bundle: &SynthBundle) -> String {
    let mut s = format!("seed = {}\nout_dir = \"out\"\n", bundle.spec.seed);
    for c in &bundle.cities {
        s.push_str("\n[[cities]]\n");
        s.push_str(&format!("name = \"{}\"\n", c.name));
        for (key, file) in LAYER_FILES {
            s.push_str(&format!("{key} = \"{}/{file}\"\n", c.name));
        }
    }
    s
}

pub fn write_bundle(bundle: &SynthBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in &bundle.cities {
        write_city(c, &dir.join(&c.name))?;
    }
    write(&dir.join("truth.csv"), &truth_to_csv(&bundle.truth))?;
    let mut planted = serde_json::to_string_pretty(&bundle.planted).expect("planted serializes");
    planted.push('\n');
    write(&dir.join("planted.json"), &planted)?;
    let spec = toml::to_string(&bundle.spec).map_err(|e| format_err!("synth spec: {e}"))?;
    write(&dir.join("spec.toml"), &spec)?;
    write(&dir.join("pipeline.toml"), &pipeline_config(bundle))
}

/// Generates a bundle and writes it under `dir`.
pub fn generate_city(spec: &SynthSpec, dir: &Path) -> Result<SynthBundle> {
    let b = generate(spec)?;
    write_bundle(&b, dir)?;
    Ok(b)
}
