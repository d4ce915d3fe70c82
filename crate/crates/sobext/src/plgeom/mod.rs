//! Planar (and light 3D) geometric primitives.
//!
//! All boolean decisions go through the exact predicates in
//! [`predicates`]; coordinates themselves are plain f64. Curves are
//! polylines evaluated at constant speed, closed curves are
//! counterclockwise simple polygons validated on construction.

pub mod predicates;
pub mod triangulate;

pub use predicates::{
    orient2d, point_in_polygon, point_in_triangle, point_segment_distance,
    segment_segment_distance, segments_intersect, Orientation, PointLocation, SegmentMeet,
};
pub use triangulate::{convex_hull, points_diameter, triangulate};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

pub const fn p2(x: f64, y: f64) -> Point2 {
    Point2 { x, y }
}

impl Point2 {
    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }
    /// z-component of the 3D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
    pub fn dist(self, o: Point2) -> f64 {
        (self - o).norm()
    }
    pub fn normalize(self) -> Point2 {
        let n = self.norm();
        p2(self.x / n, self.y / n)
    }
    /// Counterclockwise rotation by a quarter turn.
    pub fn perp(self) -> Point2 {
        p2(-self.y, self.x)
    }
    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        p2(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        p2(self.x + o.x, self.y + o.y)
    }
}
impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        p2(self.x - o.x, self.y - o.y)
    }
}
impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        p2(self.x * s, self.y * s)
    }
}
impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        p2(-self.x, -self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn p3(x: f64, y: f64, z: f64) -> Point3 {
    Point3 { x, y, z }
}

impl Point3 {
    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
    pub fn dist(self, o: Point3) -> f64 {
        (self - o).norm()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        p3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}
impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        p3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}
impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        p3(self.x * s, self.y * s, self.z * s)
    }
}

/// Open polygonal chain. A single point is allowed and stands for a
/// degenerate (zero-length) curve; consecutive points must be distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyLine {
    pts: Vec<Point2>,
}

impl PolyLine {
    pub fn new(pts: Vec<Point2>) -> Result<PolyLine> {
        if pts.is_empty() {
            return Err(Error::DegenerateInput("empty polyline".into()));
        }
        for w in pts.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DegenerateInput(
                    "polyline has repeated consecutive points".into(),
                ));
            }
        }
        if pts.iter().any(|p| !p.is_finite()) {
            return Err(Error::DegenerateInput("polyline has non-finite point".into()));
        }
        Ok(PolyLine { pts })
    }

    /// Builds from raw points, silently dropping consecutive duplicates.
    pub fn dedup(mut pts: Vec<Point2>) -> Result<PolyLine> {
        pts.dedup();
        PolyLine::new(pts)
    }

    pub fn points(&self) -> &[Point2] {
        &self.pts
    }
    pub fn first(&self) -> Point2 {
        self.pts[0]
    }
    pub fn last(&self) -> Point2 {
        *self.pts.last().unwrap()
    }
    pub fn len_points(&self) -> usize {
        self.pts.len()
    }

    pub fn length(&self) -> f64 {
        self.pts.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Cumulative arc lengths, starting at 0, one entry per point.
    pub fn cumlen(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.pts.len());
        out.push(0.0);
        for w in self.pts.windows(2) {
            acc += w[0].dist(w[1]);
            out.push(acc);
        }
        out
    }

    pub fn reversed(&self) -> PolyLine {
        let mut pts = self.pts.clone();
        pts.reverse();
        PolyLine { pts }
    }

    /// Joins two chains whose endpoints coincide exactly.
    pub fn join(&self, other: &PolyLine) -> Result<PolyLine> {
        if self.last() != other.first() {
            return Err(Error::DegenerateInput(
                "join requires exactly matching endpoints".into(),
            ));
        }
        let mut pts = self.pts.clone();
        pts.extend_from_slice(&other.pts[1..]);
        // A degenerate (single-point) operand contributes nothing.
        if pts.is_empty() {
            pts.push(self.last());
        }
        PolyLine::dedup(pts)
    }

    /// True if the open chain has no self-contact other than consecutive
    /// segments sharing their common endpoint.
    pub fn is_simple(&self) -> bool {
        let n = self.pts.len();
        if n < 3 {
            return true;
        }
        for i in 0..n - 1 {
            for j in i + 1..n - 1 {
                let m = segments_intersect(self.pts[i], self.pts[i + 1], self.pts[j], self.pts[j + 1])
                    .expect("polyline segments are nonzero");
                let adjacent = j == i + 1;
                match m {
                    SegmentMeet::Disjoint => {}
                    SegmentMeet::EndpointTouch if adjacent => {}
                    _ => return false,
                }
            }
        }
        true
    }
}

/// Evaluates `line` at constant speed over [0, 1].
pub fn eval_constant_speed(line: &PolyLine, t: f64) -> Result<Point2> {
    ParamCurve::unit(line.clone()).eval(t)
}

/// A polyline traversed at constant speed as a parameter runs over
/// [t0, t1].
#[derive(Debug, Clone)]
pub struct ParamCurve {
    line: PolyLine,
    t0: f64,
    t1: f64,
    cum: Vec<f64>,
}

impl ParamCurve {
    pub fn new(line: PolyLine, t0: f64, t1: f64) -> Result<ParamCurve> {
        if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::DegenerateInput("ParamCurve needs t0 < t1".into()));
        }
        let cum = line.cumlen();
        Ok(ParamCurve { line, t0, t1, cum })
    }

    pub fn unit(line: PolyLine) -> ParamCurve {
        let cum = line.cumlen();
        ParamCurve { line, t0: 0.0, t1: 1.0, cum }
    }

    pub fn line(&self) -> &PolyLine {
        &self.line
    }
    pub fn domain(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }
    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn eval(&self, t: f64) -> Result<Point2> {
        if !(t >= self.t0 && t <= self.t1) {
            return Err(Error::OutOfDomain(format!(
                "t = {t} outside [{}, {}]",
                self.t0, self.t1
            )));
        }
        let total = self.length();
        if total == 0.0 {
            return Ok(self.line.first());
        }
        let s = (t - self.t0) / (self.t1 - self.t0) * total;
        Ok(self.eval_arclen(s))
    }

    /// Evaluation by arc length; clamps to the ends.
    pub fn eval_arclen(&self, s: f64) -> Point2 {
        let pts = self.line.points();
        if s <= 0.0 {
            return pts[0];
        }
        let total = self.length();
        if s >= total {
            return *pts.last().unwrap();
        }
        // cum is strictly increasing because consecutive points differ.
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => return pts[i],
            Err(i) => i - 1,
        };
        let seg = self.cum[i + 1] - self.cum[i];
        pts[i].lerp(pts[i + 1], (s - self.cum[i]) / seg)
    }
}

/// Simple closed polygon, stored counterclockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JordanPolygon {
    verts: Vec<Point2>,
}

impl JordanPolygon {
    /// Validates simplicity and normalizes orientation to counterclockwise.
    pub fn new(mut verts: Vec<Point2>) -> Result<JordanPolygon> {
        if verts.len() < 3 {
            return Err(Error::DegenerateInput("polygon needs >= 3 vertices".into()));
        }
        if verts.iter().any(|p| !p.is_finite()) {
            return Err(Error::DegenerateInput("polygon has non-finite vertex".into()));
        }
        let n = verts.len();
        for i in 0..n {
            if verts[i] == verts[(i + 1) % n] {
                return Err(Error::DegenerateInput(
                    "polygon has repeated consecutive vertices".into(),
                ));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let m = segments_intersect(
                    verts[i],
                    verts[(i + 1) % n],
                    verts[j],
                    verts[(j + 1) % n],
                )?;
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                match m {
                    SegmentMeet::Disjoint => {}
                    SegmentMeet::EndpointTouch if adjacent => {}
                    other => {
                        return Err(Error::NonSimple(format!(
                            "sides {i} and {j} meet ({other:?})"
                        )))
                    }
                }
            }
        }
        let area = signed_area(&verts);
        if area == 0.0 {
            return Err(Error::DegenerateInput("polygon has zero area".into()));
        }
        if area < 0.0 {
            verts.reverse();
        }
        Ok(JordanPolygon { verts })
    }

    pub fn verts(&self) -> &[Point2] {
        &self.verts
    }
    pub fn len(&self) -> usize {
        self.verts.len()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn side(&self, i: usize) -> (Point2, Point2) {
        (self.verts[i], self.verts[(i + 1) % self.verts.len()])
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.verts)
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.verts.len();
        (0..n).map(|i| self.verts[i].dist(self.verts[(i + 1) % n])).sum()
    }

    pub fn locate(&self, p: Point2) -> PointLocation {
        point_in_polygon(&self.verts, p)
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.locate(p) != PointLocation::Outside
    }

    pub fn is_convex(&self) -> bool {
        let n = self.verts.len();
        (0..n).all(|i| {
            orient2d(
                self.verts[i],
                self.verts[(i + 1) % n],
                self.verts[(i + 2) % n],
            ) != Orientation::Cw
        })
    }

    /// Vertex indices where the interior angle exceeds a straight angle.
    pub fn reflex_vertices(&self) -> Vec<usize> {
        let n = self.verts.len();
        (0..n)
            .filter(|&i| {
                orient2d(
                    self.verts[(i + n - 1) % n],
                    self.verts[i],
                    self.verts[(i + 1) % n],
                ) == Orientation::Cw
            })
            .collect()
    }

    /// Copy with exactly-collinear pass-through vertices removed.
    pub fn simplified(&self) -> JordanPolygon {
        let n = self.verts.len();
        let kept: Vec<Point2> = (0..n)
            .filter(|&i| {
                orient2d(
                    self.verts[(i + n - 1) % n],
                    self.verts[i],
                    self.verts[(i + 1) % n],
                ) != Orientation::Collinear
            })
            .map(|i| self.verts[i])
            .collect();
        if kept.len() >= 3 {
            JordanPolygon { verts: kept }
        } else {
            self.clone()
        }
    }

    /// Smallest distance between two sides that do not share a vertex.
    /// Triangles have no such pair.
    pub fn min_nonadjacent_side_distance(&self) -> Result<f64> {
        let n = self.verts.len();
        if n < 4 {
            return Err(Error::DegenerateInput(
                "no non-adjacent side pairs in a triangle".into(),
            ));
        }
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a1, a2) = self.side(i);
                let (b1, b2) = self.side(j);
                best = best.min(segment_segment_distance(a1, a2, b1, b2));
            }
        }
        Ok(best)
    }

    /// Unit direction at vertex `i` bisecting the interior angle; for a
    /// straight vertex this is the inward side normal. Walking a small
    /// distance from the vertex along it stays inside the polygon.
    pub fn inner_normal(&self, i: usize) -> Point2 {
        let n = self.verts.len();
        let prev = self.verts[(i + n - 1) % n];
        let p = self.verts[i];
        let next = self.verts[(i + 1) % n];
        let u = (next - p).normalize();
        let v = (prev - p).normalize();
        let w = u + v;
        match orient2d(prev, p, next) {
            Orientation::Collinear => u.perp(),
            Orientation::Ccw => {
                if w.norm() < 1e-12 {
                    u.perp()
                } else {
                    w.normalize()
                }
            }
            Orientation::Cw => {
                if w.norm() < 1e-12 {
                    u.perp()
                } else {
                    -w.normalize()
                }
            }
        }
    }

    /// The closed boundary as a polyline (first vertex repeated at the end).
    pub fn boundary(&self) -> PolyLine {
        let mut pts = self.verts.clone();
        pts.push(self.verts[0]);
        PolyLine { pts }
    }

    /// Diameter of the vertex set.
    pub fn diameter(&self) -> f64 {
        points_diameter(&self.verts)
    }
}

pub fn signed_area(verts: &[Point2]) -> f64 {
    let n = verts.len();
    let mut a = 0.0;
    for i in 0..n {
        let p = verts[i];
        let q = verts[(i + 1) % n];
        a += p.cross(q);
    }
    a / 2.0
}
