//! Minimal GeoJSON FeatureCollection reader/writer for projected layers.
//!
//! Supports Point, Polygon and MultiPolygon geometries; anything else is a
//! format error. Coordinates are taken as planar meters.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{format_err, Error, Result};
use crate::geo::{Point, Polygon};

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Point(Point),
    Polygon(Polygon),
    MultiPolygon(Vec<Polygon>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub geometry: Geometry,
    pub properties: Map<String, Value>,
}

impl Feature {
    pub fn new(geometry: Geometry) -> Self {
        Feature {
            geometry,
            properties: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.properties.insert(key.to_string(), value.into());
        self
    }

    pub fn str_prop(&self, key: &str) -> Result<&str> {
        match self.properties.get(key) {
            Some(Value::String(s)) => Ok(s),
            Some(other) => Err(format_err!(
                "property `{key}` must be a string, got {other}"
            )),
            None => Err(format_err!("missing property `{key}`")),
        }
    }

    pub fn f64_prop(&self, key: &str) -> Result<f64> {
        match self.properties.get(key) {
            Some(Value::Number(n)) => n
                .as_f64()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err!("property `{key}` is not a finite number")),
            Some(other) => Err(format_err!("property `{key}` must be numeric, got {other}")),
            None => Err(format_err!("missing property `{key}`")),
        }
    }

    /// The feature's polygons (a Polygon yields one, a MultiPolygon many).
    pub fn polygons(&self) -> Result<Vec<&Polygon>> {
        match &self.geometry {
            Geometry::Polygon(p) => Ok(vec![p]),
            Geometry::MultiPolygon(ps) => Ok(ps.iter().collect()),
            Geometry::Point(_) => Err(format_err!("expected polygon geometry, found Point")),
        }
    }

    pub fn point(&self) -> Result<Point> {
        match &self.geometry {
            Geometry::Point(p) => Ok(*p),
            _ => Err(format_err!("expected Point geometry")),
        }
    }
}

fn parse_position(v: &Value) -> Result<Point> {
    let arr = v
        .as_array()
        .ok_or_else(|| format_err!("position must be an array"))?;
    if arr.len() < 2 {
        return Err(format_err!("position needs at least 2 coordinates"));
    }
    let x = arr[0]
        .as_f64()
        .ok_or_else(|| format_err!("non-numeric x"))?;
    let y = arr[1]
        .as_f64()
        .ok_or_else(|| format_err!("non-numeric y"))?;
    let p = Point::new(x, y);
    if !p.is_finite() {
        return Err(format_err!("non-finite coordinate"));
    }
    Ok(p)
}

fn parse_ring(v: &Value) -> Result<Vec<Point>> {
    v.as_array()
        .ok_or_else(|| format_err!("ring must be an array"))?
        .iter()
        .map(parse_position)
        .collect()
}

fn parse_polygon(v: &Value) -> Result<Polygon> {
    let rings = v
        .as_array()
        .ok_or_else(|| format_err!("polygon coordinates must be an array"))?;
    let mut it = rings.iter();
    let ext = parse_ring(
        it.next()
            .ok_or_else(|| format_err!("polygon has no rings"))?,
    )?;
    let holes = it.map(parse_ring).collect::<Result<Vec<_>>>()?;
    Polygon::new(ext, holes).map_err(|e| match e {
        Error::Validation(m) => Error::Format(m),
        other => other,
    })
}

fn parse_geometry(v: &Value) -> Result<Geometry> {
    let kind = v
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| format_err!("geometry without type"))?;
    let coords = v
        .get("coordinates")
        .ok_or_else(|| format_err!("geometry without coordinates"))?;
    match kind {
        "Point" => Ok(Geometry::Point(parse_position(coords)?)),
        "Polygon" => Ok(Geometry::Polygon(parse_polygon(coords)?)),
        "MultiPolygon" => {
            let polys = coords
                .as_array()
                .ok_or_else(|| format_err!("multipolygon coordinates must be an array"))?
                .iter()
                .map(parse_polygon)
                .collect::<Result<Vec<_>>>()?;
            if polys.is_empty() {
                return Err(format_err!("empty MultiPolygon"));
            }
            Ok(Geometry::MultiPolygon(polys))
        }
        other => Err(format_err!("unsupported geometry type `{other}`")),
    }
}

/// Parses a FeatureCollection document.
pub fn parse_feature_collection(text: &str) -> Result<Vec<Feature>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| format_err!("invalid GeoJSON: {e}"))?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(format_err!("top-level object is not a FeatureCollection"));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| format_err!("FeatureCollection without features array"))?;
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let geometry = f
                .get("geometry")
                .ok_or_else(|| format_err!("feature {i} has no geometry"))
                .and_then(parse_geometry)
                .map_err(|e| format_err!("feature {i}: {e}"))?;
            let properties = match f.get("properties") {
                Some(Value::Object(m)) => m.clone(),
                Some(Value::Null) | None => Map::new(),
                Some(_) => return Err(format_err!("feature {i}: properties must be an object")),
            };
            Ok(Feature {
                geometry,
                properties,
            })
        })
        .collect()
}

pub fn read_feature_collection(path: &Path) -> Result<Vec<Feature>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_collection(&text).map_err(|e| format_err!("{}: {e}", path.display()))
}

fn ring_json(r: &[Point]) -> Value {
    Value::Array(r.iter().map(|p| json!([p.x, p.y])).collect())
}

fn polygon_json(p: &Polygon) -> Value {
    Value::Array(p.rings().map(|r| ring_json(r)).collect())
}

fn geometry_json(g: &Geometry) -> Value {
    match g {
        Geometry::Point(p) => json!({"type": "Point", "coordinates": [p.x, p.y]}),
        Geometry::Polygon(p) => json!({"type": "Polygon", "coordinates": polygon_json(p)}),
        Geometry::MultiPolygon(ps) => json!({
            "type": "MultiPolygon",
            "coordinates": Value::Array(ps.iter().map(polygon_json).collect()),
        }),
    }
}

/// Serializes features as a FeatureCollection. Property keys are emitted
/// in sorted order, so output is byte-stable for equal input.
pub fn to_feature_collection_string(features: &[Feature]) -> String {
    let fs: Vec<Value> = features
        .iter()
        .map(|f| {
            json!({
                "type": "Feature",
                "geometry": geometry_json(&f.geometry),
                "properties": Value::Object(f.properties.clone()),
            })
        })
        .collect();
    let doc = json!({"type": "FeatureCollection", "features": fs});
    let mut s = serde_json::to_string(&doc).expect("GeoJSON values always serialize");
    s.push('\n');
    s
}

pub fn write_feature_collection(path: &Path, features: &[Feature]) -> Result<()> {
    fs::write(path, to_feature_collection_string(features)).map_err(|e| Error::io(path, e))
}
