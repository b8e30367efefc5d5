use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{distance, Point, Polygon};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Point,
    pub radius: f64,
}

impl Circle {
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius
    }

    fn covers(&self, p: Point) -> bool {
        distance(self.center, p) <= self.radius * (1.0 + 1e-12) + 1e-300
    }

    fn from_two(a: Point, b: Point) -> Circle {
        let center = Point::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y));
        Circle {
            center,
            radius: distance(a, b) * 0.5,
        }
    }

    /// Circumcircle of three points; `None` when collinear.
    fn from_three(a: Point, b: Point, c: Point) -> Option<Circle> {
        let (bx, by) = (b.x - a.x, b.y - a.y);
        let (cx, cy) = (c.x - a.x, c.y - a.y);
        let d = 2.0 * (bx * cy - by * cx);
        if d == 0.0 {
            return None;
        }
        let b2 = bx * bx + by * by;
        let c2 = cx * cx + cy * cy;
        let ux = (cy * b2 - by * c2) / d;
        let uy = (bx * c2 - cx * b2) / d;
        if !ux.is_finite() || !uy.is_finite() {
            return None;
        }
        let center = Point::new(a.x + ux, a.y + uy);
        let radius = distance(center, a)
            .max(distance(center, b))
            .max(distance(center, c));
        Some(Circle { center, radius })
    }
}

/// Smallest circle enclosing all exterior-ring vertices of `p`.
pub fn min_enclosing_circle(p: &Polygon) -> Result<Circle> {
    min_enclosing_circle_of_points(p.vertices())
}

/// Welzl's algorithm (iterative move-to-front form) on a deterministically
/// shuffled copy of the points. Needs at least three distinct points.
pub fn min_enclosing_circle_of_points(points: &[Point]) -> Result<Circle> {
    let mut pts: Vec<Point> = Vec::with_capacity(points.len());
    for p in points {
        if !pts.contains(p) {
            pts.push(*p);
        }
    }
    if pts.len() < 3 {
        return Err(Error::Degenerate(format!(
            "enclosing circle needs 3 distinct vertices, got {}",
            pts.len()
        )));
    }
    // Work relative to the first point to limit cancellation.
    let o = pts[0];
    let mut local: Vec<Point> = pts.iter().map(|p| p.sub(o)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c1c1e);
    local.shuffle(&mut rng);

    let mut c = Circle {
        center: local[0],
        radius: 0.0,
    };
    for i in 1..local.len() {
        if c.covers(local[i]) {
            continue;
        }
        c = Circle {
            center: local[i],
            radius: 0.0,
        };
        for j in 0..i {
            if c.covers(local[j]) {
                continue;
            }
            c = Circle::from_two(local[i], local[j]);
            for k in 0..j {
                if c.covers(local[k]) {
                    continue;
                }
                c = Circle::from_three(local[i], local[j], local[k])
                    .unwrap_or_else(|| farthest_pair_circle(&[local[i], local[j], local[k]]));
            }
        }
    }
    Ok(Circle {
        center: c.center.add(o),
        radius: c.radius,
    })
}

fn farthest_pair_circle(pts: &[Point]) -> Circle {
    let mut best = Circle::from_two(pts[0], pts[1]);
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let c = Circle::from_two(pts[i], pts[j]);
            if c.radius > best.radius {
                best = c;
            }
        }
    }
    best
}
