//! Planar geometry in a projected, meter-based CRS.
//!
//! Every polygon is validated on construction: rings are closed, have at
//! least four points (three distinct vertices plus the closing point) and
//! finite coordinates. Orientation is normalized so the exterior ring is
//! counter-clockwise and holes are clockwise.

mod circle;
mod clip;
mod voronoi;

pub use circle::{min_enclosing_circle, min_enclosing_circle_of_points, Circle};
pub use clip::{clip_to_convex, intersection_area};
pub use voronoi::{voronoi_partition, VoronoiCell};

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Tolerance in meters for on-boundary decisions.
pub const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    #[inline]
    pub(crate) fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    #[inline]
    pub(crate) fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

/// Euclidean distance in the projected plane.
pub fn distance(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

#[inline]
pub(crate) fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn of_points<'a>(pts: impl IntoIterator<Item = &'a Point>) -> Option<BBox> {
        let mut it = pts.into_iter();
        let first = it.next()?;
        let mut b = BBox {
            min_x: first.x,
            min_y: first.y,
            max_x: first.x,
            max_y: first.y,
        };
        for p in it {
            b.min_x = b.min_x.min(p.x);
            b.min_y = b.min_y.min(p.y);
            b.max_x = b.max_x.max(p.x);
            b.max_y = b.max_y.max(p.y);
        }
        Some(b)
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox {
            min_x: self.min_x.min(o.min_x),
            min_y: self.min_y.min(o.min_y),
            max_x: self.max_x.max(o.max_x),
            max_y: self.max_y.max(o.max_y),
        }
    }

    /// True when the boxes share interior area (touching edges do not count).
    pub fn overlaps(&self, o: &BBox) -> bool {
        self.min_x < o.max_x && o.min_x < self.max_x && self.min_y < o.max_y && o.min_y < self.max_y
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min_x - BOUNDARY_EPS
            && p.x <= self.max_x + BOUNDARY_EPS
            && p.y >= self.min_y - BOUNDARY_EPS
            && p.y <= self.max_y + BOUNDARY_EPS
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    /// Grows the box by `frac` of its width/height on every side.
    pub fn expanded(&self, frac: f64) -> BBox {
        let dx = self.width() * frac;
        let dy = self.height() * frac;
        BBox {
            min_x: self.min_x - dx,
            min_y: self.min_y - dy,
            max_x: self.max_x + dx,
            max_y: self.max_y + dy,
        }
    }

    pub fn to_polygon(&self) -> Result<Polygon> {
        Polygon::rect(self.min_x, self.min_y, self.max_x, self.max_y)
    }
}

/// A closed ring: first point equals last point.
pub type Ring = Vec<Point>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    exterior: Ring,
    holes: Vec<Ring>,
}

impl Polygon {
    /// Builds a polygon, validating every ring and normalizing orientation.
    pub fn new(exterior: Ring, holes: Vec<Ring>) -> Result<Self> {
        let mut exterior = exterior;
        validate_ring(&exterior, "exterior")?;
        if signed_ring_area(&exterior, exterior[0]) < 0.0 {
            exterior.reverse();
        }
        let mut normalized = Vec::with_capacity(holes.len());
        for (i, mut h) in holes.into_iter().enumerate() {
            validate_ring(&h, &format!("hole {i}"))?;
            if signed_ring_area(&h, h[0]) > 0.0 {
                h.reverse();
            }
            normalized.push(h);
        }
        Ok(Polygon {
            exterior,
            holes: normalized,
        })
    }

    /// Builds a polygon from an open vertex list (closing point appended).
    pub fn from_vertices(vertices: &[Point]) -> Result<Self> {
        let mut ring = vertices.to_vec();
        if let Some(&first) = ring.first() {
            ring.push(first);
        }
        Polygon::new(ring, Vec::new())
    }

    /// Axis-aligned rectangle.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let (xa, xb) = (x0.min(x1), x0.max(x1));
        let (ya, yb) = (y0.min(y1), y0.max(y1));
        Polygon::new(
            vec![
                Point::new(xa, ya),
                Point::new(xb, ya),
                Point::new(xb, yb),
                Point::new(xa, yb),
                Point::new(xa, ya),
            ],
            Vec::new(),
        )
    }

    pub fn exterior(&self) -> &[Point] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Ring] {
        &self.holes
    }

    /// All rings, exterior first.
    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    /// Exterior vertices without the closing duplicate.
    pub fn vertices(&self) -> &[Point] {
        &self.exterior[..self.exterior.len() - 1]
    }

    pub fn bbox(&self) -> BBox {
        BBox::of_points(self.exterior.iter()).expect("validated ring is non-empty")
    }

    /// Reference point used to keep shoelace sums well conditioned for
    /// large projected coordinates.
    fn anchor(&self) -> Point {
        self.exterior[0]
    }

    /// Shoelace area of the exterior minus holes.
    pub fn area(&self) -> f64 {
        let o = self.anchor();
        self.rings().map(|r| signed_ring_area(r, o)).sum::<f64>()
    }

    /// Area-weighted centroid with holes subtracted.
    pub fn centroid(&self) -> Result<Point> {
        let o = self.anchor();
        let mut a = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for ring in self.rings() {
            for w in ring.windows(2) {
                let p = w[0].sub(o);
                let q = w[1].sub(o);
                let c = p.x * q.y - q.x * p.y;
                a += c;
                cx += (p.x + q.x) * c;
                cy += (p.y + q.y) * c;
            }
        }
        a *= 0.5;
        let scale = self.bbox().width().max(self.bbox().height());
        if a.abs() <= f64::EPSILON * scale * scale || a == 0.0 {
            return Err(Error::Degenerate("centroid of zero-area polygon".into()));
        }
        Ok(Point::new(o.x + cx / (6.0 * a), o.y + cy / (6.0 * a)))
    }

    /// Boundary-inclusive point containment (tolerance [`BOUNDARY_EPS`]).
    pub fn contains(&self, p: Point) -> bool {
        if !self.bbox().contains(p) {
            return false;
        }
        for ring in self.rings() {
            if on_ring_boundary(ring, p) {
                return true;
            }
        }
        if !ring_contains_strict(&self.exterior, p) {
            return false;
        }
        !self.holes.iter().any(|h| ring_contains_strict(h, p))
    }

    /// True when the exterior is convex and there are no holes.
    pub fn is_convex(&self) -> bool {
        if !self.holes.is_empty() {
            return false;
        }
        let v = self.vertices();
        let n = v.len();
        (0..n).all(|i| cross(v[i], v[(i + 1) % n], v[(i + 2) % n]) >= -1e-12 * self.scale_sq())
    }

    fn scale_sq(&self) -> f64 {
        let b = self.bbox();
        let s = b.width().max(b.height());
        s * s
    }

    /// Checks that no two edges of any rings cross or overlap, except for
    /// adjacent edges of a ring meeting at their shared vertex.
    pub fn is_simple(&self) -> bool {
        let mut edges: Vec<(usize, usize, Point, Point)> = Vec::new();
        for (ri, ring) in self.rings().enumerate() {
            for (ei, w) in ring.windows(2).enumerate() {
                edges.push((ri, ei, w[0], w[1]));
            }
        }
        for i in 0..edges.len() {
            for j in (i + 1)..edges.len() {
                let (ri, ei, a, b) = edges[i];
                let (rj, ej, c, d) = edges[j];
                if ri == rj {
                    let n = self.rings().nth(ri).map_or(0, |r| r.len() - 1);
                    let adjacent = ej == ei + 1 || (ei == 0 && ej == n - 1);
                    if adjacent {
                        // Adjacent edges may only share their common vertex.
                        if collinear_overlap(a, b, c, d) {
                            return false;
                        }
                        continue;
                    }
                }
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// Translates every vertex.
    pub fn translated(&self, dx: f64, dy: f64) -> Polygon {
        let t = |r: &Ring| r.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect();
        Polygon {
            exterior: t(&self.exterior),
            holes: self.holes.iter().map(t).collect(),
        }
    }

    /// Scales every vertex about the origin by `s > 0`.
    pub fn scaled(&self, s: f64) -> Polygon {
        let t = |r: &Ring| r.iter().map(|p| Point::new(p.x * s, p.y * s)).collect();
        Polygon {
            exterior: t(&self.exterior),
            holes: self.holes.iter().map(t).collect(),
        }
    }
}

/// Shoelace area of a polygon. See [`Polygon::area`].
pub fn polygon_area(p: &Polygon) -> f64 {
    p.area()
}

/// Area-weighted centroid. See [`Polygon::centroid`].
pub fn polygon_centroid(p: &Polygon) -> Result<Point> {
    p.centroid()
}

fn validate_ring(ring: &[Point], what: &str) -> Result<()> {
    if ring.len() < 4 {
        return Err(validation!(
            "{what} ring has {} points, need at least 4",
            ring.len()
        ));
    }
    if let Some(p) = ring.iter().find(|p| !p.is_finite()) {
        return Err(validation!("{what} ring has non-finite point {p:?}"));
    }
    if ring[0] != ring[ring.len() - 1] {
        return Err(validation!("{what} ring is not closed"));
    }
    Ok(())
}

/// Signed shoelace area of a closed ring, computed relative to `o`.
pub(crate) fn signed_ring_area(ring: &[Point], o: Point) -> f64 {
    let mut s = 0.0;
    for w in ring.windows(2) {
        let p = w[0].sub(o);
        let q = w[1].sub(o);
        s += p.x * q.y - q.x * p.y;
    }
    0.5 * s
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    let ab = b.sub(a);
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 == 0.0 {
        return distance(a, p) <= BOUNDARY_EPS;
    }
    let t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2;
    let t = t.clamp(0.0, 1.0);
    let proj = Point::new(a.x + t * ab.x, a.y + t * ab.y);
    distance(proj, p) <= BOUNDARY_EPS
}

fn on_ring_boundary(ring: &[Point], p: Point) -> bool {
    ring.windows(2).any(|w| on_segment(w[0], w[1], p))
}

/// Even-odd crossing test; boundary points are handled by the caller.
fn ring_contains_strict(ring: &[Point], p: Point) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn orient(a: Point, b: Point, c: Point) -> i8 {
    let v = cross(a, b, c);
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn within_box(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

pub(crate) fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0 {
        return true;
    }
    (o1 == 0 && within_box(a, b, c))
        || (o2 == 0 && within_box(a, b, d))
        || (o3 == 0 && within_box(c, d, a))
        || (o4 == 0 && within_box(c, d, b))
}

/// Adjacent edges (a,b),(c,d) with b == c overlapping beyond the shared vertex.
fn collinear_overlap(a: Point, b: Point, c: Point, d: Point) -> bool {
    // Reorder so the path is p -> q -> s with q the shared vertex.
    let (p, q, s) = if b == c { (a, b, d) } else { (c, d, b) };
    orient(p, q, s) == 0 && {
        let u = q.sub(p);
        let v = s.sub(q);
        u.x * v.x + u.y * v.y < 0.0
    }
}
