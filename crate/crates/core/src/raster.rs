//! Georeferenced RGB rasters, 64x64 imagelet tiling and district assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use crate::error::{format_err, validation, Error, Result};
use crate::geo::{intersection_area, Polygon};
use crate::layers::District;

pub const TILE: usize = 64;
const TILE_BYTES: usize = TILE * TILE * 3;

/// Axis-aligned georeferencing: `origin` is the top-left corner of the
/// top-left pixel; northing decreases with row index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoRaster {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, top row first.
    pub pixels: Vec<u8>,
    pub transform: GeoTransform,
}

impl GeoRaster {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        transform: GeoTransform,
    ) -> Result<Self> {
        if width < TILE || height < TILE {
            return Err(validation!(
                "raster must be at least {TILE}x{TILE}, got {width}x{height}"
            ));
        }
        if pixels.len() != width * height * 3 {
            return Err(validation!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            ));
        }
        let t = transform;
        let finite = [t.origin_x, t.origin_y, t.pixel_size_x, t.pixel_size_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite || t.pixel_size_x <= 0.0 || t.pixel_size_y <= 0.0 {
            return Err(validation!("invalid geotransform {t:?}"));
        }
        Ok(GeoRaster {
            width,
            height,
            pixels,
            transform,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn bounds(&self) -> Polygon {
        let t = &self.transform;
        Polygon::rect(
            t.origin_x,
            t.origin_y - self.height as f64 * t.pixel_size_y,
            t.origin_x + self.width as f64 * t.pixel_size_x,
            t.origin_y,
        )
        .expect("validated raster has positive extent")
    }
}

/// Decodes a GeoTIFF holding one 3-band 8-bit image with ModelTiepoint and
/// ModelPixelScale tags.
pub fn decode_geotiff(bytes: &[u8]) -> Result<GeoRaster> {
    let tiff_err = |e: tiff::TiffError| format_err!("unreadable TIFF: {e}");
    let mut limits = Limits::default();
    limits.decoding_buffer_size = 1 << 28;
    let mut dec = Decoder::new(Cursor::new(bytes))
        .map_err(tiff_err)?
        .with_limits(limits);
    let (w, h) = dec.dimensions().map_err(tiff_err)?;
    match dec.colortype().map_err(tiff_err)? {
        ColorType::RGB(8) => {}
        ColorType::Gray(_) => return Err(format_err!("raster has 1 band, expected 3")),
        ColorType::GrayA(_) => return Err(format_err!("raster has 2 bands, expected 3")),
        ColorType::RGBA(_) => return Err(format_err!("raster has 4 bands, expected 3")),
        other => return Err(format_err!("unsupported raster color type {other:?}")),
    }
    let scale = dec
        .find_tag(Tag::ModelPixelScaleTag)
        .map_err(tiff_err)?
        .ok_or_else(|| format_err!("missing georeferencing (ModelPixelScale)"))?
        .into_f64_vec()
        .map_err(tiff_err)?;
    let tie = dec
        .find_tag(Tag::ModelTiepointTag)
        .map_err(tiff_err)?
        .ok_or_else(|| format_err!("missing georeferencing (ModelTiepoint)"))?
        .into_f64_vec()
        .map_err(tiff_err)?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(format_err!("malformed georeferencing tags"));
    }
    let (sx, sy) = (scale[0], scale[1]);
    let transform = GeoTransform {
        origin_x: tie[3] - tie[0] * sx,
        origin_y: tie[4] + tie[1] * sy,
        pixel_size_x: sx,
        pixel_size_y: sy,
    };
    let (w, h) = (w as usize, h as usize);
    if w < TILE || h < TILE {
        return Err(format_err!(
            "raster must be at least {TILE}x{TILE}, got {w}x{h}"
        ));
    }
    let pixels = match dec.read_image().map_err(tiff_err)? {
        DecodingResult::U8(v) => v,
        _ => return Err(format_err!("raster samples are not 8-bit")),
    };
    if pixels.len() != w * h * 3 {
        return Err(format_err!("planar or truncated pixel data"));
    }
    GeoRaster::new(w, h, pixels, transform).map_err(|e| match e {
        Error::Validation(m) => Error::Format(m),
        other => other,
    })
}

pub fn load_raster(path: &Path) -> Result<GeoRaster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_geotiff(&bytes).map_err(|e| format_err!("{}: {e}", path.display()))
}

pub fn encode_geotiff(r: &GeoRaster) -> Result<Vec<u8>> {
    let tiff_err = |e: tiff::TiffError| validation!("TIFF encoding failed: {e}");
    let mut buf = Cursor::new(Vec::new());
    {
        let mut enc = TiffEncoder::new(&mut buf).map_err(tiff_err)?;
        let mut img = enc
            .new_image::<colortype::RGB8>(r.width as u32, r.height as u32)
            .map_err(tiff_err)?;
        let t = &r.transform;
        img.encoder()
            .write_tag(
                Tag::ModelPixelScaleTag,
                &[t.pixel_size_x, t.pixel_size_y, 0.0][..],
            )
            .map_err(tiff_err)?;
        img.encoder()
            .write_tag(
                Tag::ModelTiepointTag,
                &[0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0][..],
            )
            .map_err(tiff_err)?;
        img.write_data(&r.pixels).map_err(tiff_err)?;
    }
    Ok(buf.into_inner())
}

pub fn write_geotiff(path: &Path, r: &GeoRaster) -> Result<()> {
    fs::write(path, encode_geotiff(r)?).map_err(|e| Error::io(path, e))
}

/// `<city>:<row>:<col>`, row and col counted in tiles from the raster origin.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageletId {
    pub city: String,
    pub row: usize,
    pub col: usize,
}

impl fmt::Display for ImageletId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.city, self.row, self.col)
    }
}

impl FromStr for ImageletId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.rsplitn(3, ':');
        let (col, row, city) = (it.next(), it.next(), it.next());
        match (city, row, col) {
            (Some(city), Some(row), Some(col)) if !city.is_empty() => {
                let parse = |v: &str| {
                    if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
                        return None;
                    }
                    v.parse::<usize>().ok()
                };
                match (parse(row), parse(col)) {
                    (Some(row), Some(col)) => Ok(ImageletId {
                        city: city.to_string(),
                        row,
                        col,
                    }),
                    _ => Err(format_err!("bad imagelet id `{s}`")),
                }
            }
            _ => Err(format_err!("bad imagelet id `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imagelet {
    pub id: ImageletId,
    /// 64x64 interleaved RGB.
    pub pixels: Vec<u8>,
    pub bounds: Polygon,
}

/// Cuts the raster into 64x64 tiles anchored at its origin, dropping
/// incomplete edge tiles and tiles whose bounds miss `boundary`.
pub fn tile_imagelets(r: &GeoRaster, city: &str, boundary: &Polygon) -> Vec<Imagelet> {
    let t = &r.transform;
    let (tw, th) = (TILE as f64 * t.pixel_size_x, TILE as f64 * t.pixel_size_y);
    // Neighbouring tiles share edges bit for bit.
    let edge_x = |k: usize| t.origin_x + k as f64 * tw;
    let edge_y = |k: usize| t.origin_y - k as f64 * th;
    let mut out = Vec::new();
    for tr in 0..r.height / TILE {
        for tc in 0..r.width / TILE {
            let bounds = Polygon::rect(edge_x(tc), edge_y(tr + 1), edge_x(tc + 1), edge_y(tr))
                .expect("positive tile extent");
            if intersection_area(&bounds, boundary) <= 0.0 {
                continue;
            }
            let mut pixels = Vec::with_capacity(TILE_BYTES);
            for row in tr * TILE..(tr + 1) * TILE {
                let start = (row * r.width + tc * TILE) * 3;
                pixels.extend_from_slice(&r.pixels[start..start + TILE * 3]);
            }
            out.push(Imagelet {
                id: ImageletId {
                    city: city.to_string(),
                    row: tr,
                    col: tc,
                },
                pixels,
                bounds,
            });
        }
    }
    if out.is_empty() {
        warn!("no imagelet of city `{city}` intersects its boundary");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub imagelet_id: ImageletId,
    pub district_id: Option<String>,
    pub overlap_m2: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentTable {
    pub entries: Vec<Assignment>,
    /// Assigned imagelets per city.
    pub counts: BTreeMap<String, usize>,
}

impl AssignmentTable {
    pub fn from_entries(entries: Vec<Assignment>) -> Self {
        let mut counts = BTreeMap::new();
        for e in &entries {
            if e.district_id.is_some() {
                *counts.entry(e.imagelet_id.city.clone()).or_insert(0) += 1;
            }
        }
        AssignmentTable { entries, counts }
    }

    pub fn district_of(&self) -> BTreeMap<&ImageletId, &str> {
        self.entries
            .iter()
            .filter_map(|e| e.district_id.as_deref().map(|d| (&e.imagelet_id, d)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "imagelet_id",
            "city",
            "row",
            "col",
            "district_id",
            "overlap_m2",
        ])
        .expect("in-memory write");
        for e in &self.entries {
            w.write_record([
                e.imagelet_id.to_string(),
                e.imagelet_id.city.clone(),
                e.imagelet_id.row.to_string(),
                e.imagelet_id.col.to_string(),
                e.district_id.clone().unwrap_or_default(),
                e.overlap_m2.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| format_err!("assignment CSV: {e}"))?
            .iter()
            .map(str::to_string)
            .collect();
        if header
            != [
                "imagelet_id",
                "city",
                "row",
                "col",
                "district_id",
                "overlap_m2",
            ]
        {
            return Err(format_err!("assignment CSV has unexpected header"));
        }
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| format_err!("assignment row {}: {e}", i + 1))?;
            let id: ImageletId = rec[0].parse()?;
            if id.city != rec[1] || id.row.to_string() != rec[2] || id.col.to_string() != rec[3] {
                return Err(format_err!(
                    "assignment row {}: id disagrees with city/row/col",
                    i + 1
                ));
            }
            let overlap: f64 = rec[5]
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| format_err!("assignment row {}: bad overlap", i + 1))?;
            let district_id = (!rec[4].is_empty()).then(|| rec[4].to_string());
            entries.push(Assignment {
                imagelet_id: id,
                district_id,
                overlap_m2: overlap,
            });
        }
        Ok(Self::from_entries(entries))
    }
}

/// Assigns every imagelet to the district it overlaps most. Ties (equal
/// within 1e-9 relative) go to the smallest district id; imagelets touching
/// no district stay unassigned.
pub fn assign_imagelets(ims: &[Imagelet], districts: &[District]) -> AssignmentTable {
    let mut order: Vec<&District> = districts.iter().collect();
    order.sort_by(|a, b| a.district_id.cmp(&b.district_id));
    let boxes: Vec<_> = order.iter().map(|d| d.polygon.bbox()).collect();
    let entries = ims
        .iter()
        .map(|im| {
            let bb = im.bounds.bbox();
            let mut best: Option<(&str, f64)> = None;
            for (d, dbb) in order.iter().zip(&boxes) {
                if !bb.overlaps(dbb) {
                    continue;
                }
                let a = intersection_area(&im.bounds, &d.polygon);
                if a <= 0.0 {
                    continue;
                }
                match best {
                    Some((_, b)) if a <= b * (1.0 + 1e-9) => {}
                    _ => best = Some((&d.district_id, a)),
                }
            }
            Assignment {
                imagelet_id: im.id.clone(),
                district_id: best.map(|(d, _)| d.to_string()),
                overlap_m2: best.map_or(0.0, |(_, a)| a),
            }
        })
        .collect();
    AssignmentTable::from_entries(entries)
}

pub fn encode_png(im: &Imagelet) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, TILE as u32, TILE as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(&im.pixels).expect("64x64 RGB payload");
    }
    out
}

pub fn png_name(id: &ImageletId) -> String {
    format!("{}_{}_{}.png", id.city, id.row, id.col)
}

/// PNG manifest (`file,imagelet_id`).
pub fn png_manifest(ims: &[Imagelet]) -> String {
    let mut manifest = String::from("file,imagelet_id\n");
    for im in ims {
        manifest.push_str(&format!("{},{}\n", png_name(&im.id), im.id));
    }
    manifest
}

/// Writes `<city>_<row>_<col>.png` per imagelet plus `manifest.csv`.
pub fn write_imagelet_pngs(dir: &Path, ims: &[Imagelet]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for im in ims {
        let path = dir.join(png_name(&im.id));
        fs::write(&path, encode_png(im)).map_err(|e| Error::io(&path, e))?;
    }
    let mpath = dir.join("manifest.csv");
    fs::write(&mpath, png_manifest(ims)).map_err(|e| Error::io(&mpath, e))
}
