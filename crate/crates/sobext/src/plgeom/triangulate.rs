//! Ear-clipping triangulation and convex-hull utilities.

use super::predicates::{orient2d, point_in_triangle, Orientation};
use super::{JordanPolygon, Point2};
use crate::error::{Error, Result};

/// Triangulates a simple polygon by ear clipping, returning exactly
/// n - 2 index triples into the polygon's vertex array, each ordered
/// counterclockwise (degenerate triples can appear only at exactly
/// collinear vertices). Quadratic time, which is fine at the sizes the
/// geodesic layer produces.
pub fn triangulate(poly: &JordanPolygon) -> Result<Vec<[usize; 3]>> {
    let verts = poly.verts();
    let n = verts.len();
    let mut active: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n - 2);

    while active.len() > 3 {
        let m = active.len();
        let mut clipped = false;
        // Prefer strictly convex ears; fall back to collinear ones.
        for pass in 0..2 {
            for k in 0..m {
                let ia = active[(k + m - 1) % m];
                let iv = active[k];
                let ib = active[(k + 1) % m];
                let o = orient2d(verts[ia], verts[iv], verts[ib]);
                let admissible = match (pass, o) {
                    (0, Orientation::Ccw) => true,
                    (1, Orientation::Collinear) => true,
                    _ => false,
                };
                if !admissible {
                    continue;
                }
                let blocked = active.iter().any(|&j| {
                    j != ia
                        && j != iv
                        && j != ib
                        && point_in_triangle(verts[ia], verts[iv], verts[ib], verts[j])
                });
                if blocked {
                    continue;
                }
                out.push([ia, iv, ib]);
                active.remove(k);
                clipped = true;
                break;
            }
            if clipped {
                break;
            }
        }
        if !clipped {
            return Err(Error::ConstructionFailed(
                "ear clipping found no ear; polygon is malformed".into(),
            ));
        }
    }
    out.push([active[0], active[1], active[2]]);
    Ok(out)
}

/// Convex hull in counterclockwise order (collinear boundary points
/// dropped). Accepts any point set with at least one element.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<Point2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2
            && orient2d(lower[lower.len() - 2], lower[lower.len() - 1], p) != Orientation::Ccw
        {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2
            && orient2d(upper[upper.len() - 2], upper[upper.len() - 1], p) != Orientation::Ccw
        {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Diameter of a point set: largest pairwise distance, computed on the
/// convex hull.
pub fn points_diameter(points: &[Point2]) -> f64 {
    let hull = convex_hull(points);
    if hull.len() < 2 {
        return 0.0;
    }
    let mut best: f64 = 0.0;
    for i in 0..hull.len() {
        for j in i + 1..hull.len() {
            best = best.max(hull[i].dist(hull[j]));
        }
    }
    best
}
