//! Exact-decision planar predicates.
//!
//! Every yes/no decision in the geometry layer funnels through
//! [`orient2d`], which uses adaptive exact arithmetic: the fast floating
//! determinant is accepted only when it clears its rounding-error bound,
//! otherwise the exact path decides. Sign decisions are therefore never
//! wrong, which the intersection classifiers and the point-location tests
//! below rely on.

use super::Point2;
use crate::error::{Error, Result};

/// Sign of the signed area of triangle (a, b, c).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Counterclockwise turn, positive area.
    Ccw,
    /// Clockwise turn, negative area.
    Cw,
    /// Exactly collinear.
    Collinear,
}

/// Exact orientation of the ordered triple (a, b, c).
pub fn orient2d(a: Point2, b: Point2, c: Point2) -> Orientation {
    let v = robust::orient2d(
        robust::Coord { x: a.x, y: a.y },
        robust::Coord { x: b.x, y: b.y },
        robust::Coord { x: c.x, y: c.y },
    );
    if v > 0.0 {
        Orientation::Ccw
    } else if v < 0.0 {
        Orientation::Cw
    } else {
        Orientation::Collinear
    }
}

/// How two closed segments meet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMeet {
    /// No common point.
    Disjoint,
    /// Exactly one common point, and it is an endpoint of at least one
    /// segment (corner contact or T-contact).
    EndpointTouch,
    /// Exactly one common point, interior to both segments.
    InteriorCross,
    /// Infinitely many common points (collinear overlap).
    Overlap,
}

fn on_segment_collinear(a: Point2, b: Point2, p: Point2) -> bool {
    // Assumes p collinear with (a, b); checks the bounding box.
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Classifies the intersection of closed segments (a1, a2) and (b1, b2).
///
/// Zero-length segments are rejected: callers that can produce them must
/// special-case the point first.
pub fn segments_intersect(a1: Point2, a2: Point2, b1: Point2, b2: Point2) -> Result<SegmentMeet> {
    if a1 == a2 || b1 == b2 {
        return Err(Error::DegenerateInput(
            "segments_intersect requires nonzero-length segments".into(),
    ));
    }
    let d1 = orient2d(b1, b2, a1);
    let d2 = orient2d(b1, b2, a2);
    let d3 = orient2d(a1, a2, b1);
    let d4 = orient2d(a1, a2, b2);

    use Orientation::*;
    if d1 == Collinear && d2 == Collinear {
        // All four points collinear: intersection is empty, a point, or a
        // subsegment.
        let hits = [
            on_segment_collinear(b1, b2, a1),
            on_segment_collinear(b1, b2, a2),
            on_segment_collinear(a1, a2, b1),
            on_segment_collinear(a1, a2, b2),
        ];
        if !hits.iter().any(|&h| h) {
            return Ok(SegmentMeet::Disjoint);
        }
        // Project onto the dominant axis to measure the shared interval.
        let dx = (a2.x - a1.x).abs();
        let dy = (a2.y - a1.y).abs();
        let key = |p: Point2| if dx >= dy { p.x } else { p.y };
        let (alo, ahi) = minmax(key(a1), key(a2));
        let (blo, bhi) = minmax(key(b1), key(b2));
        let lo = alo.max(blo);
        let hi = ahi.min(bhi);
        if lo > hi {
            Ok(SegmentMeet::Disjoint)
        } else if lo == hi {
            Ok(SegmentMeet::EndpointTouch)
        } else {
            Ok(SegmentMeet::Overlap)
        }
    } else if d1 != Collinear && d2 != Collinear && d3 != Collinear && d4 != Collinear {
        // General position: a common point exists iff each segment
        // straddles the other's line, and it is then interior to both.
        if d1 != d2 && d3 != d4 {
            Ok(SegmentMeet::InteriorCross)
        } else {
            Ok(SegmentMeet::Disjoint)
        }
    } else {
        // Some endpoint sits on the other segment's line while the
        // segments are not doubly collinear, so any common point must be
        // one of those endpoints.
        let touch = (d1 == Collinear && on_segment_collinear(b1, b2, a1))
            || (d2 == Collinear && on_segment_collinear(b1, b2, a2))
            || (d3 == Collinear && on_segment_collinear(a1, a2, b1))
            || (d4 == Collinear && on_segment_collinear(a1, a2, b2));
        if touch {
            Ok(SegmentMeet::EndpointTouch)
        } else {
            Ok(SegmentMeet::Disjoint)
        }
    }
}

fn minmax(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Where a point sits relative to a simple closed polygon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLocation {
    Inside,
    Boundary,
    Outside,
}

/// Exact point location against the closed polygonal chain `verts`
/// (implicitly closed, orientation irrelevant).
pub fn point_in_polygon(verts: &[Point2], p: Point2) -> PointLocation {
    let n = verts.len();
    for i in 0..n {
        let a = verts[i];
        let b = verts[(i + 1) % n];
        if a == b {
            if p == a {
                return PointLocation::Boundary;
            }
            continue;
        }
        if orient2d(a, b, p) == Orientation::Collinear && on_segment_collinear(a, b, p) {
            return PointLocation::Boundary;
        }
    }
    // Crossing parity with the half-open rule: an edge contributes when its
    // endpoints straddle the horizontal line through p, counting the lower
    // endpoint in and the upper endpoint out.
    let mut inside = false;
    for i in 0..n {
        let a = verts[i];
        let b = verts[(i + 1) % n];
        if (a.y <= p.y) != (b.y <= p.y) {
            let o = orient2d(a, b, p);
            let upward = b.y > a.y;
            if (upward && o == Orientation::Ccw) || (!upward && o == Orientation::Cw) {
                inside = !inside;
            }
        }
    }
    if inside {
        PointLocation::Inside
    } else {
        PointLocation::Outside
    }
}

/// True if p lies in the closed triangle (a, b, c); orientation-agnostic.
pub fn point_in_triangle(a: Point2, b: Point2, c: Point2, p: Point2) -> bool {
    let d1 = orient2d(a, b, p);
    let d2 = orient2d(b, c, p);
    let d3 = orient2d(c, a, p);
    use Orientation::*;
    let has_ccw = [d1, d2, d3].iter().any(|&d| d == Ccw);
    let has_cw = [d1, d2, d3].iter().any(|&d| d == Cw);
    !(has_ccw && has_cw)
}

/// Euclidean distance from p to the closed segment (a, b).
pub fn point_segment_distance(a: Point2, b: Point2, p: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Euclidean distance between closed segments; zero when they meet.
pub fn segment_segment_distance(a1: Point2, a2: Point2, b1: Point2, b2: Point2) -> f64 {
    if a1 != a2 && b1 != b2 {
        if let Ok(m) = segments_intersect(a1, a2, b1, b2) {
            if m != SegmentMeet::Disjoint {
                return 0.0;
            }
        }
    }
    let d = point_segment_distance(b1, b2, a1)
        .min(point_segment_distance(b1, b2, a2))
        .min(point_segment_distance(a1, a2, b1))
        .min(point_segment_distance(a1, a2, b2));
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plgeom::p2;

    #[test]
    fn orientation_signs() {
        assert_eq!(
            orient2d(p2(0.0, 0.0), p2(1.0, 0.0), p2(0.0, 1.0)),
            Orientation::Ccw
        );
        assert_eq!(
            orient2d(p2(0.0, 0.0), p2(0.0, 1.0), p2(1.0, 0.0)),
            Orientation::Cw
        );
        assert_eq!(
            orient2d(p2(0.0, 0.0), p2(1.0, 1.0), p2(2.0, 2.0)),
            Orientation::Collinear
        );
    }

    #[test]
    fn orientation_near_degenerate_is_exact() {
        // A tiny representable displacement off a huge segment: the naive
        // determinant loses all significant digits here, the adaptive path
        // must still get the sign right.
        let a = p2(0.0, 0.0);
        let b = p2(1e15, 1e15);
        let c = p2(5e14, 5e14 + 0.125);
        assert_eq!(orient2d(a, b, c), Orientation::Ccw);
        assert_eq!(orient2d(b, a, c), Orientation::Cw);
        let d = p2(5e14, 5e14);
        assert_eq!(orient2d(a, b, d), Orientation::Collinear);
    }

    #[test]
    fn segment_classification_cases() {
        let m = |a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)| {
            segments_intersect(p2(a.0, a.1), p2(b.0, b.1), p2(c.0, c.1), p2(d.0, d.1)).unwrap()
        };
        assert_eq!(
            m((0., 0.), (1., 0.), (0., 1.), (1., 1.)),
            SegmentMeet::Disjoint
        );
        assert_eq!(
            m((0., 0.), (1., 1.), (1., 0.), (0., 1.)),
            SegmentMeet::InteriorCross
        );
        assert_eq!(
            m((0., 0.), (1., 0.), (1., 0.), (1., 1.)),
            SegmentMeet::EndpointTouch
        );
        // T-contact: endpoint interior to the other segment.
        assert_eq!(
            m((0., 0.), (2., 0.), (1., 0.), (1., 1.)),
            SegmentMeet::EndpointTouch
        );
        assert_eq!(
            m((0., 0.), (2., 0.), (1., 0.), (3., 0.)),
            SegmentMeet::Overlap
        );
        // Collinear, sharing one endpoint only.
        assert_eq!(
            m((0., 0.), (1., 0.), (1., 0.), (2., 0.)),
            SegmentMeet::EndpointTouch
        );
        // Collinear, separated.
        assert_eq!(
            m((0., 0.), (1., 0.), (2., 0.), (3., 0.)),
            SegmentMeet::Disjoint
        );
        // Near-miss: crossing lines but intersection beyond an end.
        assert_eq!(
            m((0., 0.), (1., 0.), (2., -1.), (2.5, 1.)),
            SegmentMeet::Disjoint
        );
    }

    #[test]
    fn zero_length_rejected() {
        assert!(segments_intersect(p2(0., 0.), p2(0., 0.), p2(1., 0.), p2(1., 1.)).is_err());
    }

    #[test]
    fn point_location_square() {
        let sq = [p2(0., 0.), p2(1., 0.), p2(1., 1.), p2(0., 1.)];
        assert_eq!(point_in_polygon(&sq, p2(0.5, 0.5)), PointLocation::Inside);
        assert_eq!(point_in_polygon(&sq, p2(0.5, 0.0)), PointLocation::Boundary);
        assert_eq!(point_in_polygon(&sq, p2(1.0, 1.0)), PointLocation::Boundary);
        assert_eq!(point_in_polygon(&sq, p2(1.5, 0.5)), PointLocation::Outside);
        // Ray through a vertex must not double-count.
        assert_eq!(point_in_polygon(&sq, p2(-0.5, 1.0)), PointLocation::Outside);
        assert_eq!(point_in_polygon(&sq, p2(-0.5, 0.0)), PointLocation::Outside);
    }

    #[test]
    fn distances() {
        assert_eq!(
            point_segment_distance(p2(0., 0.), p2(2., 0.), p2(1., 1.)),
            1.0
        );
        assert_eq!(
            segment_segment_distance(p2(0., 0.), p2(1., 0.), p2(0., 1.), p2(1., 1.)),
            1.0
        );
        assert_eq!(
            segment_segment_distance(p2(0., 0.), p2(1., 1.), p2(1., 0.), p2(0., 1.)),
            0.0
        );
    }
}
