//! City vector layers: districts with their blocks, land use, parks,
//! street intersections, radio sites, water and building-height tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::geo::{min_enclosing_circle, Point, Polygon};
use crate::geojson::{read_feature_collection, Feature};

/// A block with its cached area and anisotropicity ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub polygon: Polygon,
    pub area: f64,
    /// Area over the area of the minimum enclosing circle, in (0, 1].
    pub phi: f64,
}

impl Block {
    pub fn new(polygon: Polygon) -> Result<Self> {
        let area = polygon.area();
        if area.is_nan() || area <= 0.0 {
            return Err(Error::Degenerate("block has zero area".into()));
        }
        let circle = min_enclosing_circle(&polygon)?;
        let phi = (area / circle.area()).min(1.0);
        if !(phi > 0.0) {
            return Err(Error::Degenerate("block has no enclosing circle".into()));
        }
        Ok(Block { polygon, area, phi })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct District {
    pub district_id: String,
    pub city: String,
    pub polygon: Polygon,
    pub blocks: Vec<Block>,
}

impl District {
    pub fn new(district_id: impl Into<String>, city: impl Into<String>, polygon: Polygon) -> Self {
        District {
            district_id: district_id.into(),
            city: city.into(),
            polygon,
            blocks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LandUseCategory {
    #[serde(rename = "residential")]
    Residential,
    #[serde(rename = "commercial-industrial-institutional")]
    CommercialIndustrialInstitutional,
    #[serde(rename = "recreational-parks-water")]
    RecreationalParksWater,
}

impl LandUseCategory {
    pub const ALL: [LandUseCategory; 3] = [
        LandUseCategory::Residential,
        LandUseCategory::CommercialIndustrialInstitutional,
        LandUseCategory::RecreationalParksWater,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LandUseCategory::Residential => "residential",
            LandUseCategory::CommercialIndustrialInstitutional => {
                "commercial-industrial-institutional"
            }
            LandUseCategory::RecreationalParksWater => "recreational-parks-water",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for LandUseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LandUseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LandUseCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format_err!("unknown land-use category `{s}`"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandUseLayer {
    pub features: Vec<(Polygon, LandUseCategory)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioSite {
    pub position: Point,
    /// Connections over a typical business day.
    pub connections: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivityLayer {
    pub sites: Vec<RadioSite>,
    pub water: Vec<Polygon>,
}

/// Building counts per district and height category, plus the number of
/// floors each category stands for.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildingHeightTable {
    pub counts: BTreeMap<String, BTreeMap<String, u64>>,
    pub floors: BTreeMap<String, u32>,
}

impl BuildingHeightTable {
    /// Parses `district_id,height_category,count` and
    /// `height_category,floors` CSV documents.
    pub fn parse(counts_csv: &str, floors_csv: &str) -> Result<Self> {
        let floors = parse_height_floors(floors_csv)?;
        let counts = parse_height_counts(counts_csv)?;
        for (d, m) in &counts {
            for hc in m.keys() {
                if !floors.contains_key(hc) {
                    return Err(format_err!(
                        "district {d}: height category `{hc}` has no floors mapping"
                    ));
                }
            }
        }
        Ok(BuildingHeightTable { counts, floors })
    }

    pub fn load(counts_path: &Path, floors_path: &Path) -> Result<Self> {
        let c = std::fs::read_to_string(counts_path).map_err(|e| Error::io(counts_path, e))?;
        let f = std::fs::read_to_string(floors_path).map_err(|e| Error::io(floors_path, e))?;
        Self::parse(&c, &f)
    }
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn check_header(rdr: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<()> {
    let h = rdr
        .headers()
        .map_err(|e| format_err!("unreadable CSV header: {e}"))?;
    let got: Vec<&str> = h.iter().collect();
    if got != expected {
        return Err(format_err!(
            "expected CSV header `{}`, got `{}`",
            expected.join(","),
            got.join(",")
        ));
    }
    Ok(())
}

/// Parses `district_id,height_category,count`.
pub fn parse_height_counts(text: &str) -> Result<BTreeMap<String, BTreeMap<String, u64>>> {
    let mut rdr = csv_reader(text);
    check_header(&mut rdr, &["district_id", "height_category", "count"])?;
    let mut out: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err!("row {}: {e}", i + 1))?;
        if rec.len() != 3 {
            return Err(format_err!("row {}: expected 3 fields", i + 1));
        }
        let count: u64 = rec[2].parse().map_err(|_| {
            format_err!(
                "row {}: count `{}` is not a non-negative integer",
                i + 1,
                &rec[2]
            )
        })?;
        let slot = out
            .entry(rec[0].to_string())
            .or_default()
            .entry(rec[1].to_string())
            .or_insert(0);
        *slot = slot
            .checked_add(count)
            .ok_or_else(|| format_err!("row {}: count overflow", i + 1))?;
    }
    Ok(out)
}

/// Parses `height_category,floors`.
pub fn parse_height_floors(text: &str) -> Result<BTreeMap<String, u32>> {
    let mut rdr = csv_reader(text);
    check_header(&mut rdr, &["height_category", "floors"])?;
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err!("row {}: {e}", i + 1))?;
        if rec.len() != 2 {
            return Err(format_err!("row {}: expected 2 fields", i + 1));
        }
        let floors: u32 = rec[1].parse().ok().filter(|&f| f > 0).ok_or_else(|| {
            format_err!(
                "row {}: floors `{}` must be a positive integer",
                i + 1,
                &rec[1]
            )
        })?;
        if out.insert(rec[0].to_string(), floors).is_some() {
            return Err(format_err!("duplicate height category `{}`", &rec[0]));
        }
    }
    Ok(out)
}

fn single_polygon(f: &Feature, what: &str) -> Result<Polygon> {
    let ps = f.polygons()?;
    match ps.as_slice() {
        [p] => Ok((*p).clone()),
        _ => Err(format_err!("{what} must be a single Polygon")),
    }
}

/// Districts from features carrying `district_id` and `city`, sorted by id.
pub fn districts_from_features(features: &[Feature]) -> Result<Vec<District>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        let id = f.str_prop("district_id")?.to_string();
        let city = f.str_prop("city")?.to_string();
        let polygon = single_polygon(f, &format!("district {id}"))?;
        if !(polygon.area() > 0.0) {
            return Err(format_err!("district {id} has zero area"));
        }
        if !seen.insert(id.clone()) {
            return Err(format_err!("duplicate district_id `{id}`"));
        }
        out.push(District::new(id, city, polygon));
    }
    out.sort_by(|a, b| a.district_id.cmp(&b.district_id));
    Ok(out)
}

pub fn load_districts(path: &Path) -> Result<Vec<District>> {
    districts_from_features(&read_feature_collection(path)?)
}

/// Attaches block polygons (features with `district_id`) to their districts.
/// Degenerate blocks and blocks naming unknown districts are skipped with
/// a warning.
pub fn attach_blocks(districts: &mut [District], features: &[Feature]) -> Result<usize> {
    let index: BTreeMap<String, usize> = districts
        .iter()
        .enumerate()
        .map(|(i, d)| (d.district_id.clone(), i))
        .collect();
    let mut skipped = 0;
    for (k, f) in features.iter().enumerate() {
        let id = f.str_prop("district_id")?;
        let Some(&di) = index.get(id) else {
            warn!("block {k}: unknown district `{id}`, skipped");
            skipped += 1;
            continue;
        };
        for poly in f.polygons()? {
            match Block::new(poly.clone()) {
                Ok(b) => {
                    let d = &districts[di];
                    if !poly.vertices().iter().all(|v| d.polygon.contains(*v)) {
                        warn!("block {k} extends outside district `{id}`");
                    }
                    districts[di].blocks.push(b);
                }
                Err(e) => {
                    warn!("block {k} in district `{id}` skipped: {e}");
                    skipped += 1;
                }
            }
        }
    }
    Ok(skipped)
}

pub fn land_use_from_features(features: &[Feature]) -> Result<LandUseLayer> {
    let mut layer = LandUseLayer::default();
    for f in features {
        let cat: LandUseCategory = f.str_prop("category")?.parse()?;
        for p in f.polygons()? {
            layer.features.push((p.clone(), cat));
        }
    }
    Ok(layer)
}

pub fn polygons_from_features(features: &[Feature]) -> Result<Vec<Polygon>> {
    let mut out = Vec::new();
    for f in features {
        out.extend(f.polygons()?.into_iter().cloned());
    }
    Ok(out)
}

pub fn points_from_features(features: &[Feature]) -> Result<Vec<Point>> {
    features.iter().map(Feature::point).collect()
}

pub fn sites_from_features(features: &[Feature]) -> Result<Vec<RadioSite>> {
    features
        .iter()
        .map(|f| {
            let connections = f.f64_prop("connections")?;
            if connections < 0.0 {
                return Err(format_err!("negative connection count {connections}"));
            }
            Ok(RadioSite {
                position: f.point()?,
                connections,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn height_tables() {
        let t = BuildingHeightTable::parse(
            "district_id,height_category,count\nd1,low,5\nd1,high,3\nd2,low,1\n",
            "height_category,floors\nlow,2\nhigh,8\n",
        )
        .unwrap();
        assert_eq!(t.counts["d1"]["high"], 3);
        assert_eq!(t.floors["high"], 8);

        assert!(parse_height_floors("height_category,floors\nx,0\n").is_err());
        assert!(parse_height_counts("district_id,height_category,count\nd,x,-1\n").is_err());
        assert!(BuildingHeightTable::parse(
            "district_id,height_category,count\nd1,mid,1\n",
            "height_category,floors\nlow,2\n"
        )
        .is_err());
        assert!(parse_height_counts("a,b\n").is_err());
    }

    #[test]
    fn block_phi_of_square() {
        let b = Block::new(Polygon::rect(0.0, 0.0, 10.0, 10.0).unwrap()).unwrap();
        assert!((b.phi - 2.0 / std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(b.area, 100.0);
    }

    #[test]
    fn category_strings() {
        for c in LandUseCategory::ALL {
            assert_eq!(c.as_str().parse::<LandUseCategory>().unwrap(), c);
        }
        assert!("park".parse::<LandUseCategory>().is_err());
    }
}
