//! Polygon intersection areas and convex clipping.
//!
//! `intersection_area` works for arbitrary simple polygons with holes. When
//! one operand is convex the other is clipped against it ring by ring
//! (Sutherland-Hodgman); otherwise both polygons are decomposed into signed
//! triangle fans around a shared origin and every triangle pair is clipped.
//! Both routes only ever accumulate signed areas, so degenerate slivers
//! produced by clipping non-convex rings contribute nothing.

use std::cmp::Ordering;

use super::{cross, signed_ring_area, BBox, Point, Polygon};

/// Clips an open vertex list against the left side of the directed line a->b.
fn clip_halfplane(subject: &[Point], a: Point, b: Point, out: &mut Vec<Point>) {
    out.clear();
    let n = subject.len();
    if n == 0 {
        return;
    }
    for i in 0..n {
        let p = subject[i];
        let q = subject[(i + 1) % n];
        let fp = cross(a, b, p);
        let fq = cross(a, b, q);
        if fp >= 0.0 {
            out.push(p);
        }
        if (fp >= 0.0) != (fq >= 0.0) {
            let t = fp / (fp - fq);
            out.push(Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)));
        }
    }
}

/// Sutherland-Hodgman clip of an open vertex list by a convex, CCW, open
/// vertex list.
pub(crate) fn clip_by_convex(subject: &[Point], clipper: &[Point]) -> Vec<Point> {
    let mut cur = subject.to_vec();
    let mut next = Vec::with_capacity(cur.len() + 4);
    let m = clipper.len();
    for i in 0..m {
        if cur.is_empty() {
            break;
        }
        clip_halfplane(&cur, clipper[i], clipper[(i + 1) % m], &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

fn open_area(v: &[Point]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let o = v[0];
    let mut s = 0.0;
    for i in 1..v.len() - 1 {
        s += cross(o, v[i], v[i + 1]);
    }
    0.5 * s
}

fn local_ring(ring: &[Point], o: Point) -> Vec<Point> {
    ring[..ring.len() - 1].iter().map(|p| p.sub(o)).collect()
}

fn canonical_order(a: &Polygon, b: &Polygon) -> Ordering {
    let key = |p: &Polygon| {
        p.rings()
            .flat_map(|r| r.iter())
            .flat_map(|pt| [pt.x, pt.y])
            .collect::<Vec<_>>()
    };
    let (ka, kb) = (key(a), key(b));
    for (x, y) in ka.iter().zip(kb.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    ka.len().cmp(&kb.len())
}

/// Area of the intersection of two polygons; 0 when disjoint.
pub fn intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    let (ba, bb) = (a.bbox(), b.bbox());
    if !ba.overlaps(&bb) {
        return 0.0;
    }
    // Fixed operand order makes the result exactly symmetric.
    let (a, b) = match canonical_order(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let (ba, bb) = (a.bbox(), b.bbox());
    let o = Point::new(
        0.5 * (ba.min_x.max(bb.min_x) + ba.max_x.min(bb.max_x)),
        0.5 * (ba.min_y.max(bb.min_y) + ba.max_y.min(bb.max_y)),
    );
    let area = if b.is_convex() {
        convex_route(a, b, o)
    } else if a.is_convex() {
        convex_route(b, a, o)
    } else {
        fan_route(a, b, o)
    };
    let cap = a.area().min(b.area());
    area.clamp(0.0, cap)
}

fn convex_route(subject: &Polygon, convex: &Polygon, o: Point) -> f64 {
    let clipper = local_ring(convex.exterior(), o);
    subject
        .rings()
        .map(|r| open_area(&clip_by_convex(&local_ring(r, o), &clipper)))
        .sum()
}

struct FanTriangle {
    sign: f64,
    tri: [Point; 3],
    bbox: BBox,
}

fn fan(p: &Polygon, o: Point) -> Vec<FanTriangle> {
    let origin = Point::new(0.0, 0.0);
    let mut out = Vec::new();
    for ring in p.rings() {
        for w in ring.windows(2) {
            let (u, v) = (w[0].sub(o), w[1].sub(o));
            let c = cross(origin, u, v);
            if c == 0.0 {
                continue;
            }
            let tri = if c > 0.0 {
                [origin, u, v]
            } else {
                [origin, v, u]
            };
            out.push(FanTriangle {
                sign: c.signum(),
                tri,
                bbox: BBox::of_points(tri.iter()).expect("three points"),
            });
        }
    }
    out
}

fn fan_route(a: &Polygon, b: &Polygon, o: Point) -> f64 {
    let fa = fan(a, o);
    let fb = fan(b, o);
    let mut total = 0.0;
    for ta in &fa {
        for tb in &fb {
            if !ta.bbox.overlaps(&tb.bbox) {
                continue;
            }
            let clipped = clip_by_convex(&ta.tri, &tb.tri);
            total += ta.sign * tb.sign * open_area(&clipped);
        }
    }
    total
}

/// Clips a polygon (any shape, holes allowed) against a convex CCW polygon.
///
/// Returns `None` when the clipped area vanishes. Clipping a non-convex
/// subject may leave zero-width bridge edges in the output rings; areas are
/// unaffected.
pub fn clip_to_convex(subject: &Polygon, convex: &Polygon) -> Option<Polygon> {
    let o = convex.exterior()[0];
    let clipper = local_ring(convex.exterior(), o);
    let mut rings: Vec<Vec<Point>> = Vec::new();
    for ring in subject.rings() {
        let c = clip_by_convex(&local_ring(ring, o), &clipper);
        let scale = convex.bbox().width().max(convex.bbox().height());
        if c.len() < 3 || open_area(&c).abs() <= 1e-14 * scale * scale {
            rings.push(Vec::new());
            continue;
        }
        let mut closed: Vec<Point> = c.iter().map(|p| p.add(o)).collect();
        closed.push(closed[0]);
        rings.push(closed);
    }
    let mut it = rings.into_iter();
    let exterior = it.next().filter(|r| !r.is_empty())?;
    let holes: Vec<_> = it.filter(|r| !r.is_empty()).collect();
    let poly = Polygon::new(exterior, holes).ok()?;
    if signed_ring_area(poly.exterior(), poly.exterior()[0]) <= 0.0 {
        return None;
    }
    Some(poly)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::rect(x0, y0, x1, y1).unwrap()
    }

    /// Overlap of axis-aligned rectangles, computed directly.
    fn rect_overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
        let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        w * h
    }

    #[test]
    fn disjoint_and_identical() {
        let a = rect(0.0, 0.0, 1.0, 1.0);
        let b = rect(2.0, 2.0, 3.0, 3.0);
        assert_eq!(intersection_area(&a, &b), 0.0);
        assert!((intersection_area(&a, &a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shifted_square() {
        let a = rect(0.0, 0.0, 1.0, 1.0);
        let b = rect(0.5, 0.0, 1.5, 1.0);
        let expected = rect_overlap([0.0, 0.0, 1.0, 1.0], [0.5, 0.0, 1.5, 1.0]);
        assert_eq!(expected, 0.5);
        assert!((intersection_area(&a, &b) - expected).abs() < 1e-15);
    }

    #[test]
    fn touching_edges_have_zero_overlap() {
        let a = rect(0.0, 0.0, 1.0, 1.0);
        let b = rect(1.0, 0.0, 2.0, 1.0);
        assert_eq!(intersection_area(&a, &b), 0.0);
    }

    fn l_shape(off: f64) -> Polygon {
        Polygon::from_vertices(&[
            Point::new(off, off),
            Point::new(off + 2.0, off),
            Point::new(off + 2.0, off + 1.0),
            Point::new(off + 1.0, off + 1.0),
            Point::new(off + 1.0, off + 2.0),
            Point::new(off, off + 2.0),
        ])
        .unwrap()
    }

    #[test]
    fn nonconvex_pair_uses_fan_route() {
        // L-shape (area 3) against itself shifted by (0.5, 0.5).
        let a = l_shape(0.0);
        let b = l_shape(0.5);
        // Decompose each L into rectangles and sum pairwise overlaps.
        let ra = [[0.0, 0.0, 2.0, 1.0], [0.0, 1.0, 1.0, 2.0]];
        let rb = [[0.5, 0.5, 2.5, 1.5], [0.5, 1.5, 1.5, 2.5]];
        let expected: f64 = ra
            .iter()
            .flat_map(|x| rb.iter().map(move |y| rect_overlap(*x, *y)))
            .sum();
        let got = intersection_area(&a, &b);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert_eq!(got, intersection_area(&b, &a));
    }

    #[test]
    fn holes_are_subtracted() {
        let hole = vec![
            Point::new(1.0, 1.0),
            Point::new(3.0, 1.0),
            Point::new(3.0, 3.0),
            Point::new(1.0, 3.0),
            Point::new(1.0, 1.0),
        ];
        let donut = Polygon::new(rect(0.0, 0.0, 4.0, 4.0).exterior().to_vec(), vec![hole]).unwrap();
        let probe = rect(0.0, 0.0, 2.0, 2.0);
        assert!((intersection_area(&donut, &probe) - 3.0).abs() < 1e-12);
        // L(0.5) has area 3 and overlaps the hole by 0.75 + 0.5.
        assert!((intersection_area(&donut, &l_shape(0.5)) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn clip_to_convex_keeps_area() {
        let l = l_shape(0.0);
        let window = rect(0.5, 0.5, 1.5, 1.5);
        let c = clip_to_convex(&l, &window).unwrap();
        assert!((c.area() - 0.75).abs() < 1e-12);
        assert!(clip_to_convex(&l, &rect(5.0, 5.0, 6.0, 6.0)).is_none());
    }
}
