use serde::{Deserialize, Serialize};

use super::clip::{clip_by_convex, clip_to_convex};
use super::{distance, Point, Polygon, BOUNDARY_EPS};
use crate::error::{validation, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiCell {
    pub site: Point,
    pub cell: Polygon,
}

/// Voronoi cells of `sites`, each clipped to `bound`.
///
/// Each cell starts as the bounding box of `bound` and is cut by the
/// perpendicular bisector against every other site, nearest first. Once the
/// next site is farther than twice the cell's current radius no further
/// bisector can touch the cell and the scan stops.
pub fn voronoi_partition(sites: &[Point], bound: &Polygon) -> Result<Vec<VoronoiCell>> {
    if sites.is_empty() {
        return Err(validation!("voronoi partition needs at least one site"));
    }
    for (i, s) in sites.iter().enumerate() {
        if !s.is_finite() {
            return Err(validation!("site {i} is not finite"));
        }
        if !bound.contains(*s) {
            return Err(validation!(
                "site {i} at ({}, {}) lies outside the bounding polygon",
                s.x,
                s.y
            ));
        }
    }
    // Duplicate detection on a sorted copy.
    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.sort_by(|&a, &b| {
        sites[a]
            .x
            .total_cmp(&sites[b].x)
            .then(sites[a].y.total_cmp(&sites[b].y))
    });
    for w in order.windows(2) {
        if distance(sites[w[0]], sites[w[1]]) <= BOUNDARY_EPS {
            return Err(validation!("duplicate sites {} and {}", w[0], w[1]));
        }
    }

    let bb = bound.bbox();
    let frame = [
        Point::new(bb.min_x, bb.min_y),
        Point::new(bb.max_x, bb.min_y),
        Point::new(bb.max_x, bb.max_y),
        Point::new(bb.min_x, bb.max_y),
    ];
    let convex_bound = bound.is_convex();

    let mut cells = Vec::with_capacity(sites.len());
    let mut by_dist: Vec<(f64, usize)> = Vec::with_capacity(sites.len());
    for (i, &site) in sites.iter().enumerate() {
        // Local coordinates around the site.
        let mut cell: Vec<Point> = frame.iter().map(|p| p.sub(site)).collect();
        by_dist.clear();
        by_dist.extend(
            sites
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &s)| (distance(site, s), j)),
        );
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in &by_dist {
            let radius = cell.iter().map(|p| p.x.hypot(p.y)).fold(0.0_f64, f64::max);
            if d > 2.0 * radius {
                break;
            }
            let t = sites[j].sub(site);
            let m = Point::new(0.5 * t.x, 0.5 * t.y);
            // Keep the side containing the origin (the site): direction
            // perpendicular to t, rotated so the site is on the left.
            let a = m;
            let b = Point::new(m.x - t.y, m.y + t.x);
            let halfplane = [a, b];
            cell = clip_halfplane_pair(&cell, halfplane);
            if cell.is_empty() {
                break;
            }
        }
        let global: Vec<Point> = cell.iter().map(|p| p.add(site)).collect();
        let clipped = if global.len() >= 3 {
            let convex = Polygon::from_vertices(&global)?;
            if convex_bound {
                let v = clip_by_convex(bound.vertices(), convex.vertices());
                if v.len() >= 3 {
                    Polygon::from_vertices(&v).ok()
                } else {
                    None
                }
            } else {
                clip_to_convex(bound, &convex)
            }
        } else {
            None
        };
        let cell = clipped.ok_or_else(|| {
            Error::Degenerate(format!("voronoi cell of site {i} vanished after clipping"))
        })?;
        cells.push(VoronoiCell { site, cell });
    }
    Ok(cells)
}

fn clip_halfplane_pair(cell: &[Point], line: [Point; 2]) -> Vec<Point> {
    // A two-point "clipper" is a single directed edge; clip once.
    let mut out = Vec::with_capacity(cell.len() + 1);
    let n = cell.len();
    let (a, b) = (line[0], line[1]);
    for k in 0..n {
        let p = cell[k];
        let q = cell[(k + 1) % n];
        let fp = super::cross(a, b, p);
        let fq = super::cross(a, b, q);
        if fp >= 0.0 {
            out.push(p);
        }
        if (fp >= 0.0) != (fq >= 0.0) {
            let t = fp / (fp - fq);
            out.push(Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)));
        }
    }
    out
}
