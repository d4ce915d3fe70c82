//! Piecewise-linear replacement of sampled image grid curves.
//!
//! A boundary homeomorphism carries the skeleton of a shifted dyadic grid to
//! a web of image curves, one per cell side. This module turns that web into
//! a certified PL object: [`linearize_vertices`] straightens every curve
//! inside small balls around the protected points (vertex images and
//! cross-level crossings), [`linearize_sides`] inscribes the remaining arcs
//! within a clearance and reroutes any self-intersection along the shortest
//! path in the segment-union arrangement, and the exact intersection sweeps
//! certify the result. Certified grids keep shared subarcs bitwise identical,
//! stay within the clearance of the sampled originals, never gain length,
//! pass through all four vertex images of every cell, and meet the adjacent
//! level exactly at the marked crossings. [`parametrize`] finishes with
//! constant-speed pieces over the domain boundary, one piece per marked
//! interval.
//!
//! [`linearize_family`] orchestrates the whole pipeline for a stack of
//! consecutive levels, halving radii and clearances until every certificate
//! passes; the radii only need to exist, not to be sharp.

use std::collections::HashSet;

use crate::dyadic::GoodGrid;
use crate::error::{Error, Result};
use crate::maps::BoundaryMap;
use crate::plgeom::{
    point_segment_distance, segment_segment_distance, segments_intersect, JordanPolygon,
    ParamCurve, Point2, PolyLine, SegmentMeet,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Clearances and radii may halve down to here before construction gives up.
pub const RADIUS_FLOOR: f64 = 1e-12;

/// Measured guard for the constant-speed parametrization: max piece speed is
/// at most this multiple of curve length times 2^level. The piece count per
/// cell is at most 14, which caps the ratio; identity grids measure ~0.3.
pub const SPEED_RATIO_RECORDED: f64 = 14.0;

/// Breakpoint budget per side when sampling kinked maps.
const SIDE_BP_CAP: usize = 512;

/// Matching tolerance when a sampling parameter collides with an inserted
/// crossing parameter.
const PARAM_TOL: f64 = 1e-12;

fn key(p: Point2) -> (u64, u64) {
    (p.x.to_bits(), p.y.to_bits())
}

#[derive(Debug, Clone, Copy)]
struct Bbox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

fn polyline_bbox(pts: &[Point2]) -> Bbox {
    let mut b = Bbox { x0: f64::INFINITY, y0: f64::INFINITY, x1: f64::NEG_INFINITY, y1: f64::NEG_INFINITY };
    for p in pts {
        b.x0 = b.x0.min(p.x);
        b.y0 = b.y0.min(p.y);
        b.x1 = b.x1.max(p.x);
        b.y1 = b.y1.max(p.y);
    }
    b
}

fn bboxes_meet(a: &Bbox, b: &Bbox, pad: f64) -> bool {
    a.x0 <= b.x1 + pad && b.x0 <= a.x1 + pad && a.y0 <= b.y1 + pad && b.y0 <= a.y1 + pad
}

/// A protected mid-side node: the image of a crossing between this side and
/// the skeleton of the adjacent level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SideMark {
    /// Index into the side's node list.
    pub node: usize,
    /// Domain-side crossing point.
    pub domain: Point2,
    /// Its image, bitwise shared with the other level's copy of the mark.
    pub image: Point2,
    /// Level of the grid this side crosses at the mark.
    pub other_level: u32,
}

/// One sampled side image. `a` and `b` are grid vertex indices; `params` are
/// strictly increasing domain parameters in [0, 1] along the segment from
/// vertex `a` to vertex `b`, aligned with `points`.
#[derive(Debug, Clone)]
pub struct SampledSide {
    pub a: (u32, u32),
    pub b: (u32, u32),
    pub params: Vec<f64>,
    pub points: Vec<Point2>,
    pub marks: Vec<SideMark>,
}

impl SampledSide {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Node indices that must survive every rewriting step: both endpoints
    /// and every marked crossing.
    fn protected(&self) -> Vec<usize> {
        let mut out = vec![0];
        out.extend(self.marks.iter().map(|m| m.node));
        out.push(self.points.len() - 1);
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Side layout shared by sampled and PL grids: horizontal sides run from
/// vertex (i, j) to (i+1, j) for i in 0..n, j in 0..=n; vertical sides from
/// (i, j) to (i, j+1) for i in 0..=n, j in 0..n. Horizontals come first.
pub fn side_count(n: u32) -> usize {
    2 * (n as usize) * (n as usize + 1)
}

pub fn h_side(n: u32, i: u32, j: u32) -> usize {
    debug_assert!(i < n && j <= n);
    (j as usize) * (n as usize) + i as usize
}

pub fn v_side(n: u32, i: u32, j: u32) -> usize {
    debug_assert!(i <= n && j < n);
    (n as usize) * (n as usize + 1) + (i as usize) * (n as usize) + j as usize
}

fn side_endpoints(n: u32, idx: usize) -> ((u32, u32), (u32, u32)) {
    let h = (n as usize) * (n as usize + 1);
    if idx < h {
        let i = (idx % n as usize) as u32;
        let j = (idx / n as usize) as u32;
        ((i, j), (i + 1, j))
    } else {
        let r = idx - h;
        let i = (r / n as usize) as u32;
        let j = (r % n as usize) as u32;
        ((i, j), (i, j + 1))
    }
}

/// Sides of cell (i, j) in counterclockwise boundary order, with traversal
/// direction (true = stored orientation).
pub fn cell_sides(n: u32, i: u32, j: u32) -> [(usize, bool); 4] {
    [
        (h_side(n, i, j), true),
        (v_side(n, i + 1, j), true),
        (h_side(n, i, j + 1), false),
        (v_side(n, i, j), false),
    ]
}

fn assemble_loop<'a>(sides: &[(usize, bool); 4], get: impl Fn(usize) -> &'a [Point2]) -> Vec<Point2> {
    let mut out = Vec::new();
    for &(s, fwd) in sides {
        let pts = get(s);
        if fwd {
            out.extend_from_slice(&pts[..pts.len() - 1]);
        } else {
            out.extend(pts.iter().rev().take(pts.len() - 1));
        }
    }
    out
}

/// Image of a grid skeleton under a boundary map, sampled per side.
#[derive(Debug, Clone)]
pub struct ImageGrid {
    level: u32,
    grid: GoodGrid,
    vertex_images: Vec<Point2>,
    sides: Vec<SampledSide>,
}

impl ImageGrid {
    /// Samples every side image at `per_side` uniform parameters plus the
    /// map's own kink parameters (capped). Side endpoints reuse the shared
    /// vertex image values bitwise.
    pub fn sample(map: &BoundaryMap, grid: &GoodGrid, per_side: usize) -> Result<ImageGrid> {
        if per_side < 2 {
            return Err(Error::Config("per_side must be at least 2".into()));
        }
        let vertex_images = grid
            .vertices()
            .iter()
            .map(|&v| map.eval(v))
            .collect::<Result<Vec<_>>>()?;
        let n = grid.n();
        let idxs: Vec<usize> = (0..side_count(n)).collect();
        let sides = idxs
            .par_iter()
            .map(|&s| {
                let (a, b) = side_endpoints(n, s);
                let pa = grid.vertex(a.0, a.1);
                let pb = grid.vertex(b.0, b.1);
                let mut params: Vec<f64> = (0..=per_side).map(|i| i as f64 / per_side as f64).collect();
                if let Some(bp) = map.edge_breakpoints(pa, pb, SIDE_BP_CAP) {
                    for t in bp {
                        if t <= 0.0 || t >= 1.0 {
                            continue;
                        }
                        let pos = params.partition_point(|&u| u < t);
                        if (params[pos] - t).abs() > PARAM_TOL
                            && (t - params[pos - 1]).abs() > PARAM_TOL
                        {
                            params.insert(pos, t);
                        }
                    }
                }
                let ia = grid.vidx(a.0, a.1);
                let ib = grid.vidx(b.0, b.1);
                let mut points = Vec::with_capacity(params.len());
                for &t in &params {
                    let p = if t == 0.0 {
                        vertex_images[ia]
                    } else if t == 1.0 {
                        vertex_images[ib]
                    } else {
                        map.eval(pa.lerp(pb, t))?
                    };
                    points.push(p);
                }
                for w in points.windows(2) {
                    if w[0] == w[1] {
                        return Err(Error::InvariantViolated(format!(
                            "map collapses two side samples to one point near ({}, {})",
                            w[0].x, w[0].y
                        )));
                    }
                }
                Ok(SampledSide { a, b, params, points, marks: Vec::new() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageGrid { level: grid.level(), grid: grid.clone(), vertex_images, sides })
    }

    pub fn level(&self) -> u32 {
        self.level
    }
    pub fn grid(&self) -> &GoodGrid {
        &self.grid
    }
    pub fn sides(&self) -> &[SampledSide] {
        &self.sides
    }
    pub fn vertex_images(&self) -> &[Point2] {
        &self.vertex_images
    }

    /// Closed image curve of cell (i, j), counterclockwise, first node not
    /// repeated. Shared sides contribute the same stored nodes to both
    /// adjacent cells.
    pub fn cell_curve(&self, i: u32, j: u32) -> Vec<Point2> {
        let sides = cell_sides(self.grid.n(), i, j);
        assemble_loop(&sides, |s| &self.sides[s].points)
    }

    /// Inserts marked crossing nodes into one side. Batch entries are
    /// (side parameter, domain point, image point), any order.
    fn insert_side_marks(
        &mut self,
        side: usize,
        batch: &[(f64, Point2, Point2)],
        other_level: u32,
    ) -> Result<()> {
        let mut batch: Vec<_> = batch.to_vec();
        batch.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let s = &mut self.sides[side];
        for &(t, domain, image) in &batch {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvariantViolated(format!(
                    "crossing parameter {t} is not interior to its side"
                )));
            }
            let pos = s.params.partition_point(|&u| u < t);
            let node = if (s.params[pos] - t).abs() <= PARAM_TOL {
                s.points[pos] = image;
                pos
            } else if (t - s.params[pos - 1]).abs() <= PARAM_TOL {
                s.points[pos - 1] = image;
                pos - 1
            } else {
                s.params.insert(pos, t);
                s.points.insert(pos, image);
                for m in s.marks.iter_mut() {
                    if m.node >= pos {
                        m.node += 1;
                    }
                }
                pos
            };
            s.marks.push(SideMark { node, domain, image, other_level });
        }
        s.marks.sort_by_key(|m| m.node);
        Ok(())
    }
}

/// A transversal crossing between one side of the coarse grid and one side of
/// the fine grid, in the domain.
#[derive(Debug, Clone)]
pub struct CrossMeet {
    pub point: Point2,
    pub coarse_side: usize,
    pub coarse_t: f64,
    pub fine_side: usize,
    pub fine_t: f64,
}

fn segment_cross(a1: Point2, a2: Point2, b1: Point2, b2: Point2) -> (f64, f64, Point2) {
    let d1 = a2 - a1;
    let d2 = b2 - b1;
    let denom = d1.cross(d2);
    let w = b1 - a1;
    let t = w.cross(d2) / denom;
    let s = w.cross(d1) / denom;
    (t, s, a1 + d1 * t)
}

/// All crossings between the skeletons of two consecutive-level grids. The
/// shift windows keep the levels transversal, so every meet is an interior
/// crossing of two straight sides; anything else is an error.
pub fn cross_level_meets(coarse: &GoodGrid, fine: &GoodGrid) -> Result<Vec<CrossMeet>> {
    if fine.level() != coarse.level() + 1 {
        return Err(Error::Config(format!(
            "cross-level meets need consecutive levels, got {} and {}",
            coarse.level(),
            fine.level()
        )));
    }
    let nc = coarse.n();
    let nf = fine.n();
    let fine_segs: Vec<(Point2, Point2, Bbox)> = (0..side_count(nf))
        .map(|s| {
            let (a, b) = side_endpoints(nf, s);
            let pa = fine.vertex(a.0, a.1);
            let pb = fine.vertex(b.0, b.1);
            let bb = polyline_bbox(&[pa, pb]);
            (pa, pb, bb)
        })
        .collect();
    let mut out = Vec::new();
    for cs in 0..side_count(nc) {
        let (a, b) = side_endpoints(nc, cs);
        let ca = coarse.vertex(a.0, a.1);
        let cb = coarse.vertex(b.0, b.1);
        let cbb = polyline_bbox(&[ca, cb]);
        for (fs, &(fa, fb, fbb)) in fine_segs.iter().enumerate() {
            if !bboxes_meet(&cbb, &fbb, 0.0) {
                continue;
            }
            match segments_intersect(ca, cb, fa, fb)? {
                SegmentMeet::Disjoint => {}
                SegmentMeet::InteriorCross => {
                    let (t, s, p) = segment_cross(ca, cb, fa, fb);
                    out.push(CrossMeet { point: p, coarse_side: cs, coarse_t: t, fine_side: fs, fine_t: s });
                }
                m => {
                    return Err(Error::InvariantViolated(format!(
                        "levels {} and {} meet non-transversally ({m:?}) at sides {cs}/{fs}",
                        coarse.level(),
                        fine.level()
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Computes all domain crossings between the two grids and inserts their
/// images as marked nodes into both, bitwise identical on each mark.
pub fn mark_meets(map: &BoundaryMap, coarse: &mut ImageGrid, fine: &mut ImageGrid) -> Result<usize> {
    let meets = cross_level_meets(coarse.grid(), fine.grid())?;
    let mut per_coarse: Vec<Vec<(f64, Point2, Point2)>> = vec![Vec::new(); coarse.sides.len()];
    let mut per_fine: Vec<Vec<(f64, Point2, Point2)>> = vec![Vec::new(); fine.sides.len()];
    for m in &meets {
        let image = map.eval(m.point)?;
        per_coarse[m.coarse_side].push((m.coarse_t, m.point, image));
        per_fine[m.fine_side].push((m.fine_t, m.point, image));
    }
    let fl = fine.level();
    let cl = coarse.level();
    for (s, batch) in per_coarse.iter().enumerate() {
        if !batch.is_empty() {
            coarse.insert_side_marks(s, batch, fl)?;
        }
    }
    for (s, batch) in per_fine.iter().enumerate() {
        if !batch.is_empty() {
            fine.insert_side_marks(s, batch, cl)?;
        }
    }
    Ok(meets.len())
}

/// Crossing parameters of a polyline with a circle, as (segment, t) pairs in
/// traversal order.
fn circle_crossings(pts: &[Point2], c: Point2, r: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (i, w) in pts.windows(2).enumerate() {
        let d = w[1] - w[0];
        let f = w[0] - c;
        let qa = d.dot(d);
        let qb = 2.0 * f.dot(d);
        let qc = f.dot(f) - r * r;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 || qa == 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        for t in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
            let in_range = if i + 2 == pts.len() { (0.0..=1.0).contains(&t) } else { (0.0..1.0).contains(&t) };
            if in_range {
                out.push((i, t));
            }
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup_by(|a, b| a.0 == b.0 && (a.1 - b.1).abs() <= 1e-15);
    out
}

fn interp_at(pts: &[Point2], params: &[f64], seg: usize, t: f64) -> (Point2, f64) {
    let p = pts[seg].lerp(pts[seg + 1], t);
    let u = params[seg] + (params[seg + 1] - params[seg]) * t;
    (p, u)
}

/// Straightens every side inside balls around its protected nodes: on each
/// stretch between consecutive protected nodes the curve is cut at its last
/// exit from the start ball and its first entry into the end ball, and both
/// cut pieces become single segments into the protected images. `radii` is
/// indexed like the grid's vertices; marked crossings use `mark_radius`.
///
/// Fails if the doubled balls are not pairwise disjoint, or a stretch cannot
/// be cut in order; retry with smaller radii.
pub fn linearize_vertices(grid: &ImageGrid, radii: &[f64], mark_radius: f64) -> Result<ImageGrid> {
    let nv = grid.vertex_images.len();
    if radii.len() != nv {
        return Err(Error::Config(format!(
            "expected {nv} radii, got {}",
            radii.len()
        )));
    }
    if radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) || !(mark_radius > 0.0) {
        return Err(Error::Config("radii must be positive and finite".into()));
    }
    let mut balls: Vec<(Point2, f64)> = grid
        .vertex_images
        .iter()
        .zip(radii)
        .map(|(&p, &r)| (p, r))
        .collect();
    for s in &grid.sides {
        for m in &s.marks {
            balls.push((m.image, mark_radius));
        }
    }
    for i in 0..balls.len() {
        for j in i + 1..balls.len() {
            let (p, rp) = balls[i];
            let (q, rq) = balls[j];
            if p.dist(q) <= 2.0 * (rp + rq) {
                return Err(Error::ConstructionFailed(format!(
                    "doubled protected balls overlap: |{:?} - {:?}| <= 2({rp} + {rq})",
                    p, q
                )));
            }
        }
    }
    let sides = grid
        .sides
        .par_iter()
        .map(|side| {
            let r_of = |node: usize| -> f64 {
                if node == 0 {
                    radii[grid.grid.vidx(side.a.0, side.a.1)]
                } else if node == side.points.len() - 1 {
                    radii[grid.grid.vidx(side.b.0, side.b.1)]
                } else {
                    mark_radius
                }
            };
            cut_side(side, &r_of)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageGrid {
        level: grid.level,
        grid: grid.grid.clone(),
        vertex_images: grid.vertex_images.clone(),
        sides,
    })
}

fn cut_side(side: &SampledSide, r_of: &dyn Fn(usize) -> f64) -> Result<SampledSide> {
    let prot = side.protected();
    let mut points = vec![side.points[0]];
    let mut params = vec![side.params[0]];
    let mut new_marks: Vec<SideMark> = Vec::new();
    for w in prot.windows(2) {
        let (p, q) = (w[0], w[1]);
        let sub = &side.points[p..=q];
        let sub_params = &side.params[p..=q];
        let (rp, rq) = (r_of(p), r_of(q));
        let starts = circle_crossings(sub, sub[0], rp);
        let ends = circle_crossings(sub, sub[sub.len() - 1], rq);
        let &cs = starts.last().ok_or_else(|| {
            Error::ConstructionFailed("side stretch never leaves its start ball".into())
        })?;
        let &ce = ends.first().ok_or_else(|| {
            Error::ConstructionFailed("side stretch never reaches its end ball".into())
        })?;
        if cs >= ce {
            return Err(Error::ConstructionFailed(
                "protected balls overlap along a side stretch; reduce radii".into(),
            ));
        }
        let (ps, us) = interp_at(sub, sub_params, cs.0, cs.1);
        let (pe, ue) = interp_at(sub, sub_params, ce.0, ce.1);
        let mut push = |pt: Point2, u: f64| {
            if *points.last().unwrap() != pt {
                points.push(pt);
                params.push(u);
            }
        };
        push(ps, us);
        for k in cs.0 + 1..=ce.0 {
            push(sub[k], sub_params[k]);
        }
        push(pe, ue);
        push(sub[sub.len() - 1], sub_params[sub.len() - 1]);
        if q != prot[prot.len() - 1] {
            if let Some(m) = side.marks.iter().find(|m| m.node == q) {
                let mut m = m.clone();
                m.node = points.len() - 1;
                new_marks.push(m);
            }
        }
    }
    Ok(SampledSide {
        a: side.a,
        b: side.b,
        params,
        points,
        marks: new_marks,
    })
}

/// Greatest deviation of interior points from the chord, used both by the
/// inscription and by the straightness exemption.
fn chord_deviation(pts: &[Point2]) -> f64 {
    let (a, b) = (pts[0], *pts.last().unwrap());
    pts[1..pts.len() - 1]
        .iter()
        .map(|&p| point_segment_distance(a, b, p))
        .fold(0.0, f64::max)
}

/// Inscribed sub-polyline within `tol` of the input, keeping endpoints.
fn inscribe(pts: &[Point2], tol: f64) -> Vec<Point2> {
    let mut keep = vec![false; pts.len()];
    keep[0] = true;
    keep[pts.len() - 1] = true;
    let mut stack = vec![(0usize, pts.len() - 1)];
    while let Some((a, b)) = stack.pop() {
        if b <= a + 1 {
            continue;
        }
        let (mut worst, mut at) = (0.0, a);
        for i in a + 1..b {
            let d = point_segment_distance(pts[a], pts[b], pts[i]);
            if d > worst {
                worst = d;
                at = i;
            }
        }
        if worst > tol {
            keep[at] = true;
            stack.push((a, at));
            stack.push((at, b));
        }
    }
    pts.iter()
        .zip(&keep)
        .filter_map(|(&p, &k)| k.then_some(p))
        .collect()
}

/// Errors unless adjacent segments touch only at their shared node and all
/// other segment pairs are disjoint.
fn polyline_simple(pts: &[Point2]) -> Result<()> {
    let m = pts.len() - 1;
    for i in 0..m {
        for j in i + 1..m {
            let meet = segments_intersect(pts[i], pts[i + 1], pts[j], pts[j + 1])?;
            let ok = if j == i + 1 {
                matches!(meet, SegmentMeet::EndpointTouch)
            } else {
                matches!(meet, SegmentMeet::Disjoint)
            };
            if !ok {
                return Err(Error::NonSimple(format!(
                    "segments {i} and {j} of a side polyline meet ({meet:?})"
                )));
            }
        }
    }
    Ok(())
}

/// Replaces a self-intersecting open polyline by the shortest path between
/// its endpoints in the arrangement of its own segments (nodes = endpoints
/// and pairwise crossing points). Simple inputs pass through unchanged.
fn simple_or_reroute(pts: Vec<Point2>) -> Result<Vec<Point2>> {
    if pts.len() < 3 || polyline_simple(&pts).is_ok() {
        return Ok(pts);
    }
    let orig_len: f64 = pts.windows(2).map(|w| w[0].dist(w[1])).sum();
    let m = pts.len() - 1;
    let mut nodes: Vec<Point2> = Vec::new();
    let intern = |p: Point2, nodes: &mut Vec<Point2>| -> usize {
        match nodes.iter().position(|&q| q == p) {
            Some(i) => i,
            None => {
                nodes.push(p);
                nodes.len() - 1
            }
        }
    };
    // Cut list per segment: (param, node id).
    let mut cuts: Vec<Vec<(f64, usize)>> = Vec::with_capacity(m);
    for i in 0..m {
        let sa = intern(pts[i], &mut nodes);
        let sb = intern(pts[i + 1], &mut nodes);
        cuts.push(vec![(0.0, sa), (1.0, sb)]);
    }
    let proj = |a: Point2, b: Point2, p: Point2| -> f64 {
        let d = b - a;
        (p - a).dot(d) / d.dot(d)
    };
    for i in 0..m {
        for j in i + 1..m {
            let (a1, a2, b1, b2) = (pts[i], pts[i + 1], pts[j], pts[j + 1]);
            match segments_intersect(a1, a2, b1, b2)? {
                SegmentMeet::Disjoint => {}
                SegmentMeet::InteriorCross => {
                    let (t, s, p) = segment_cross(a1, a2, b1, b2);
                    let id = intern(p, &mut nodes);
                    cuts[i].push((t, id));
                    cuts[j].push((s, id));
                }
                SegmentMeet::EndpointTouch | SegmentMeet::Overlap => {
                    // Register every endpoint of one segment that lies on the
                    // other, so the path may switch segments there.
                    for (p, seg) in [(b1, i), (b2, i), (a1, j), (a2, j)] {
                        let (u, v) = if seg == i { (a1, a2) } else { (b1, b2) };
                        if point_segment_distance(u, v, p) == 0.0 {
                            let id = intern(p, &mut nodes);
                            cuts[seg].push((proj(u, v, p), id));
                        }
                    }
                }
            }
        }
    }
    let nn = nodes.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nn];
    for cl in cuts.iter_mut() {
        cl.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cl.dedup_by_key(|e| e.1);
        for w in cl.windows(2) {
            let (u, v) = (w[0].1, w[1].1);
            if u != v {
                let d = nodes[u].dist(nodes[v]);
                adj[u].push((v, d));
                adj[v].push((u, d));
            }
        }
    }
    let src = nodes.iter().position(|&q| q == pts[0]).unwrap();
    let dst = nodes.iter().position(|&q| q == pts[m]).unwrap();
    let mut dist = vec![f64::INFINITY; nn];
    let mut prev = vec![usize::MAX; nn];
    let mut done = vec![false; nn];
    dist[src] = 0.0;
    for _ in 0..nn {
        let mut u = usize::MAX;
        let mut best = f64::INFINITY;
        for v in 0..nn {
            if !done[v] && dist[v] < best {
                best = dist[v];
                u = v;
            }
        }
        if u == usize::MAX {
            break;
        }
        done[u] = true;
        for &(v, w) in &adj[u] {
            if dist[u] + w < dist[v] {
                dist[v] = dist[u] + w;
                prev[v] = u;
            }
        }
    }
    if !dist[dst].is_finite() {
        return Err(Error::ConstructionFailed(
            "segment arrangement is disconnected between side endpoints".into(),
        ));
    }
    let mut path = vec![dst];
    while *path.last().unwrap() != src {
        path.push(prev[*path.last().unwrap()]);
    }
    path.reverse();
    let out: Vec<Point2> = path.into_iter().map(|i| nodes[i]).collect();
    polyline_simple(&out).map_err(|_| {
        Error::NonSimple("shortest arrangement path is still self-intersecting".into())
    })?;
    let new_len: f64 = out.windows(2).map(|w| w[0].dist(w[1])).sum();
    if new_len > orig_len * (1.0 + 1e-12) {
        return Err(Error::InvariantViolated(
            "rerouted side polyline gained length".into(),
        ));
    }
    Ok(out)
}

/// A straightened side: endpoints, PL nodes, and surviving marked crossings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlSide {
    pub a: (u32, u32),
    pub b: (u32, u32),
    pub points: Vec<Point2>,
    pub marks: Vec<SideMark>,
}

impl PlSide {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }
}

/// Straightened image grid with certified per-cell Jordan curves.
#[derive(Debug, Clone)]
pub struct PlGrid {
    level: u32,
    grid: GoodGrid,
    vertex_images: Vec<Point2>,
    sides: Vec<PlSide>,
}

/// Inscribes every curved stretch of every side within `delta` and removes
/// self-intersections by rerouting. The first and last segment of each
/// stretch (the straightened germs) are kept as-is. Curved stretches must
/// keep their doubled `delta`-tubes pairwise disjoint; straight stretches are
/// exempt, matching the rule that only non-PL arcs need tubes.
pub fn linearize_sides(grid: &ImageGrid, delta: f64) -> Result<PlGrid> {
    let scale = 2f64.powi(-(grid.level as i32));
    if !(delta > 0.0) || delta >= scale {
        return Err(Error::Config(format!(
            "clearance {delta} must sit in (0, {scale})"
        )));
    }
    if delta < RADIUS_FLOOR {
        return Err(Error::ConstructionFailed(format!(
            "clearance underflow: {delta} < {RADIUS_FLOOR}"
        )));
    }
    // Stretch middles (between the germ segments), tagged curved or straight.
    struct Middle {
        side: usize,
        lo: usize,
        hi: usize,
        curved: bool,
        bbox: Bbox,
    }
    let mut middles: Vec<Middle> = Vec::new();
    for (s, side) in grid.sides.iter().enumerate() {
        let prot = side.protected();
        for w in prot.windows(2) {
            let (p, q) = (w[0], w[1]);
            if q - p < 3 {
                continue; // nothing between the germs
            }
            let mid = &side.points[p + 1..q];
            let straight_tol = 1e-12 * mid[0].dist(*mid.last().unwrap()).max(1.0);
            let curved = chord_deviation(mid) > straight_tol;
            middles.push(Middle { side: s, lo: p + 1, hi: q - 1, curved, bbox: polyline_bbox(mid) });
        }
    }
    let curved: Vec<&Middle> = middles.iter().filter(|m| m.curved).collect();
    for (i, a) in curved.iter().enumerate() {
        for b in curved.iter().skip(i + 1) {
            if !bboxes_meet(&a.bbox, &b.bbox, 2.0 * delta) {
                continue;
            }
            let pa = &grid.sides[a.side].points[a.lo..=a.hi];
            let pb = &grid.sides[b.side].points[b.lo..=b.hi];
            if polyline_distance(pa, pb) <= 2.0 * delta {
                return Err(Error::ConstructionFailed(format!(
                    "doubled clearance tubes of sides {} and {} overlap",
                    a.side, b.side
                )));
            }
        }
    }
    let sides = grid
        .sides
        .par_iter()
        .map(|side| straighten_side(side, delta))
        .collect::<Result<Vec<_>>>()?;
    Ok(PlGrid {
        level: grid.level,
        grid: grid.grid.clone(),
        vertex_images: grid.vertex_images.clone(),
        sides,
    })
}

fn polyline_distance(a: &[Point2], b: &[Point2]) -> f64 {
    let mut best = f64::INFINITY;
    if a.len() == 1 || b.len() == 1 {
        // Degenerate stretches reduce to point-polyline distance.
        let (pts, single) = if a.len() == 1 { (b, a[0]) } else { (a, b[0]) };
        for w in pts.windows(2) {
            best = best.min(point_segment_distance(w[0], w[1], single));
        }
        if pts.len() == 1 {
            best = pts[0].dist(single);
        }
        return best;
    }
    for wa in a.windows(2) {
        for wb in b.windows(2) {
            best = best.min(segment_segment_distance(wa[0], wa[1], wb[0], wb[1]));
        }
    }
    best
}

fn straighten_side(side: &SampledSide, delta: f64) -> Result<PlSide> {
    let prot = side.protected();
    let old_len = side.length();
    let mut points = vec![side.points[0]];
    let mut marks: Vec<SideMark> = Vec::new();
    for w in prot.windows(2) {
        let (p, q) = (w[0], w[1]);
        let stretch: Vec<Point2> = if q - p < 3 {
            side.points[p..=q].to_vec()
        } else {
            let mid = &side.points[p + 1..q];
            let straight_tol = 1e-12 * mid[0].dist(*mid.last().unwrap()).max(1.0);
            let new_mid = if chord_deviation(mid) <= straight_tol {
                vec![mid[0], *mid.last().unwrap()]
            } else {
                simple_or_reroute(inscribe(mid, delta))?
            };
            let mut st = vec![side.points[p]];
            st.extend(new_mid);
            st.push(side.points[q]);
            st
        };
        for pt in &stretch[1..] {
            if *points.last().unwrap() != *pt {
                points.push(*pt);
            }
        }
        if q != *prot.last().unwrap() {
            if let Some(m) = side.marks.iter().find(|m| m.node == q) {
                let mut m = m.clone();
                m.node = points.len() - 1;
                marks.push(m);
            }
        }
    }
    polyline_simple(&points)?;
    let out = PlSide { a: side.a, b: side.b, points, marks };
    if out.length() > old_len * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::InvariantViolated(
            "straightened side gained length".into(),
        ));
    }
    Ok(out)
}

/// Certification numbers for one straightened level.
#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: u32,
    pub sides: usize,
    pub pairs_checked: usize,
    pub touches: usize,
    pub max_deviation: f64,
    pub max_length_ratio: f64,
}

/// Certification numbers for one consecutive level pair.
#[derive(Debug, Clone, Serialize)]
pub struct CrossReport {
    pub marked: usize,
    pub pairs_checked: usize,
    pub touches: usize,
}

/// Serialization mirror: straightened curves, marked crossing points, and
/// per-cell parametrization breakpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlGridJson {
    pub level: u32,
    pub sides: Vec<PlSide>,
    pub cells: Vec<CellJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellJson {
    pub i: u32,
    pub j: u32,
    pub breakpoints: Vec<f64>,
}

impl PlGrid {
    pub fn level(&self) -> u32 {
        self.level
    }
    pub fn grid(&self) -> &GoodGrid {
        &self.grid
    }
    pub fn sides(&self) -> &[PlSide] {
        &self.sides
    }
    pub fn vertex_images(&self) -> &[Point2] {
        &self.vertex_images
    }

    pub fn cell_curve(&self, i: u32, j: u32) -> Vec<Point2> {
        let sides = cell_sides(self.grid.n(), i, j);
        assemble_loop(&sides, |s| &self.sides[s].points)
    }

    pub fn cell_polygon(&self, i: u32, j: u32) -> Result<JordanPolygon> {
        JordanPolygon::new(self.cell_curve(i, j))
    }

    /// Marked points of cell (i, j) as (domain boundary arclength, image):
    /// the four vertex images plus every crossing mark on its sides, in
    /// traversal order. The domain parameter starts at corner (i, j).
    pub fn cell_marked(&self, i: u32, j: u32) -> Vec<(f64, Point2)> {
        let n = self.grid.n();
        let quad = self.grid.quad(i, j);
        let mut offset = 0.0;
        let mut out = Vec::new();
        for (t, &(s, _fwd)) in cell_sides(n, i, j).iter().enumerate() {
            let corner = quad[t];
            let vi = match t {
                0 => self.grid.vidx(i, j),
                1 => self.grid.vidx(i + 1, j),
                2 => self.grid.vidx(i + 1, j + 1),
                _ => self.grid.vidx(i, j + 1),
            };
            out.push((offset, self.vertex_images[vi]));
            for m in &self.sides[s].marks {
                out.push((offset + m.domain.dist(corner), m.image));
            }
            offset += corner.dist(quad[(t + 1) % 4]);
        }
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        out
    }

    /// Domain boundary perimeter of cell (i, j).
    pub fn cell_period(&self, i: u32, j: u32) -> f64 {
        let quad = self.grid.quad(i, j);
        (0..4).map(|t| quad[t].dist(quad[(t + 1) % 4])).sum()
    }

    /// Constant-speed parametrization of the cell curve over its domain
    /// boundary, split at the marked points. Guards the measured speed
    /// against [`SPEED_RATIO_RECORDED`].
    pub fn cell_parametrization(&self, i: u32, j: u32) -> Result<CellParam> {
        let curve = self.cell_curve(i, j);
        let marked = self.cell_marked(i, j);
        let cp = parametrize(&curve, &marked, self.cell_period(i, j))?;
        let mut h1 = 0.0;
        for t in 0..curve.len() {
            h1 += curve[t].dist(curve[(t + 1) % curve.len()]);
        }
        let bound = SPEED_RATIO_RECORDED * h1 * 2f64.powi(self.level as i32);
        if cp.max_speed > bound {
            return Err(Error::InvariantViolated(format!(
                "cell ({i}, {j}) parametrization speed {} exceeds {bound}",
                cp.max_speed
            )));
        }
        Ok(cp)
    }

    pub fn to_json(&self) -> PlGridJson {
        let mut cells = Vec::new();
        for (i, j) in self.grid.cells() {
            cells.push(CellJson {
                i,
                j,
                breakpoints: self.cell_marked(i, j).iter().map(|m| m.0).collect(),
            });
        }
        PlGridJson { level: self.level, sides: self.sides.clone(), cells }
    }

    /// Certifies the level against the sampled original: every node within
    /// 2^-level of the original side (deviation recorded), no side gained
    /// length, endpoints and marks intact, every side simple, every cell a
    /// Jordan curve, and distinct sides meeting only at shared vertex images.
    pub fn verify_level(&self, original: &ImageGrid) -> Result<LevelReport> {
        if original.level != self.level || original.grid.n() != self.grid.n() {
            return Err(Error::Config("verify_level needs the same grid".into()));
        }
        let scale = 2f64.powi(-(self.level as i32));
        let mut max_dev = 0.0f64;
        let mut max_ratio = 0.0f64;
        for (s, side) in self.sides.iter().enumerate() {
            let orig = &original.sides[s];
            if side.points[0] != orig.points[0]
                || side.points.last() != orig.points.last()
            {
                return Err(Error::InvariantViolated(format!(
                    "side {s} endpoints moved"
                )));
            }
            for m in &side.marks {
                if side.points[m.node] != m.image {
                    return Err(Error::InvariantViolated(format!(
                        "side {s} lost a marked crossing node"
                    )));
                }
            }
            polyline_simple(&side.points)?;
            let mut probes: Vec<Point2> = side.points.clone();
            probes.extend(side.points.windows(2).map(|w| w[0].lerp(w[1], 0.5)));
            for p in probes {
                let mut d = f64::INFINITY;
                for w in orig.points.windows(2) {
                    d = d.min(point_segment_distance(w[0], w[1], p));
                }
                max_dev = max_dev.max(d);
            }
            if max_dev > scale {
                return Err(Error::InvariantViolated(format!(
                    "side {s} strays {max_dev} > {scale} from its sampled original"
                )));
            }
            let ratio = side.length() / orig.length();
            if ratio > 1.0 + 1e-9 {
                return Err(Error::InvariantViolated(format!(
                    "side {s} gained length: ratio {ratio}"
                )));
            }
            max_ratio = max_ratio.max(ratio);
        }
        for (i, j) in self.grid.cells() {
            self.cell_polygon(i, j).map_err(|e| {
                Error::NonSimple(format!("cell ({i}, {j}) curve is not Jordan: {e}"))
            })?;
        }
        let (pairs, touches) = self.sweep_within_level()?;
        Ok(LevelReport {
            level: self.level,
            sides: self.sides.len(),
            pairs_checked: pairs,
            touches,
            max_deviation: max_dev,
            max_length_ratio: max_ratio,
        })
    }

    fn sweep_within_level(&self) -> Result<(usize, usize)> {
        let bboxes: Vec<Bbox> = self.sides.iter().map(|s| polyline_bbox(&s.points)).collect();
        let mut pairs = 0;
        let mut touches = 0;
        for s1 in 0..self.sides.len() {
            for s2 in s1 + 1..self.sides.len() {
                if !bboxes_meet(&bboxes[s1], &bboxes[s2], 0.0) {
                    continue;
                }
                pairs += 1;
                let (a, b) = (&self.sides[s1], &self.sides[s2]);
                let mut allowed = HashSet::new();
                for va in [a.a, a.b] {
                    for vb in [b.a, b.b] {
                        if va == vb {
                            allowed.insert(key(self.vertex_images[self.grid.vidx(va.0, va.1)]));
                        }
                    }
                }
                let mut found = HashSet::new();
                touches += sweep_pair(&a.points, &b.points, &allowed, &mut found).map_err(
                    |e| Error::InvariantViolated(format!("sides {s1}/{s2}: {e}")),
                )?;
                if !allowed.is_empty() && found.is_empty() {
                    return Err(Error::InvariantViolated(format!(
                        "sides {s1} and {s2} share a vertex but their curves never touch"
                    )));
                }
            }
        }
        Ok((pairs, touches))
    }
}

/// Classifies every segment pair of two polylines: disjoint, or touching at a
/// bitwise-shared node whose key is in `allowed`. Everything else errors.
/// Returns the number of touches; records touched keys in `found`.
fn sweep_pair(
    pa: &[Point2],
    pb: &[Point2],
    allowed: &HashSet<(u64, u64)>,
    found: &mut HashSet<(u64, u64)>,
) -> Result<usize> {
    let mut touches = 0;
    for (i, wa) in pa.windows(2).enumerate() {
        for (j, wb) in pb.windows(2).enumerate() {
            match segments_intersect(wa[0], wa[1], wb[0], wb[1])? {
                SegmentMeet::Disjoint => {}
                SegmentMeet::EndpointTouch => {
                    let mut common = None;
                    for p in [wa[0], wa[1]] {
                        if p == wb[0] || p == wb[1] {
                            common = Some(p);
                        }
                    }
                    let p = common.ok_or_else(|| {
                        Error::InvariantViolated(format!(
                            "segments {i}/{j} touch away from any shared node"
                        ))
                    })?;
                    if !allowed.contains(&key(p)) {
                        return Err(Error::InvariantViolated(format!(
                            "segments {i}/{j} touch at ({}, {}), which is not an allowed point",
                            p.x, p.y
                        )));
                    }
                    found.insert(key(p));
                    touches += 1;
                }
                m => {
                    return Err(Error::InvariantViolated(format!(
                        "segments {i}/{j} meet ({m:?})"
                    )));
                }
            }
        }
    }
    Ok(touches)
}

/// Certifies that two straightened consecutive levels intersect exactly at
/// their shared marked crossing points.
pub fn preserve_cross_level(coarse: &PlGrid, fine: &PlGrid) -> Result<CrossReport> {
    if fine.level != coarse.level + 1 {
        return Err(Error::Config(format!(
            "cross-level check needs consecutive levels, got {} and {}",
            coarse.level, fine.level
        )));
    }
    let marked_c: HashSet<(u64, u64)> = coarse
        .sides
        .iter()
        .flat_map(|s| s.marks.iter())
        .filter(|m| m.other_level == fine.level)
        .map(|m| key(m.image))
        .collect();
    let marked_f: HashSet<(u64, u64)> = fine
        .sides
        .iter()
        .flat_map(|s| s.marks.iter())
        .filter(|m| m.other_level == coarse.level)
        .map(|m| key(m.image))
        .collect();
    if marked_c != marked_f {
        return Err(Error::InvariantViolated(
            "the two levels disagree about their marked crossings".into(),
        ));
    }
    let cb: Vec<Bbox> = coarse.sides.iter().map(|s| polyline_bbox(&s.points)).collect();
    let fb: Vec<Bbox> = fine.sides.iter().map(|s| polyline_bbox(&s.points)).collect();
    let mut pairs = 0;
    let mut touches = 0;
    let mut found = HashSet::new();
    for (i, sc) in coarse.sides.iter().enumerate() {
        for (j, sf) in fine.sides.iter().enumerate() {
            if !bboxes_meet(&cb[i], &fb[j], 0.0) {
                continue;
            }
            pairs += 1;
            touches += sweep_pair(&sc.points, &sf.points, &marked_c, &mut found)
                .map_err(|e| {
                    Error::InvariantViolated(format!(
                        "coarse side {i} vs fine side {j}: {e}"
                    ))
                })?;
        }
    }
    if found != marked_c {
        return Err(Error::InvariantViolated(format!(
            "{} marked crossings were never realized by the curves",
            marked_c.len() - found.len()
        )));
    }
    Ok(CrossReport { marked: marked_c.len(), pairs_checked: pairs, touches })
}

/// Piecewise constant-speed parametrization of a closed curve.
#[derive(Debug, Clone)]
pub struct CellParam {
    /// One constant-speed piece per marked interval; domains abut and cover
    /// [first mark, first mark + period].
    pub pieces: Vec<ParamCurve>,
    pub max_speed: f64,
}

/// Splits the closed node loop `curve` at the marked points and parametrizes
/// every piece with constant speed over its domain interval. `marked` holds
/// (domain parameter, image) pairs with strictly increasing parameters
/// spanning less than `period`; every image must lie on the curve.
pub fn parametrize(curve: &[Point2], marked: &[(f64, Point2)], period: f64) -> Result<CellParam> {
    if curve.len() < 3 {
        return Err(Error::DegenerateInput("closed curve needs 3+ nodes".into()));
    }
    if marked.is_empty() || marked.len() > 14 {
        return Err(Error::Config(format!(
            "need between 1 and 14 marked points, got {}",
            marked.len()
        )));
    }
    if !(period > 0.0) || !period.is_finite() {
        return Err(Error::Config("period must be positive".into()));
    }
    for w in marked.windows(2) {
        if !(w[0].0 < w[1].0) {
            return Err(Error::Config("marked parameters must strictly increase".into()));
        }
    }
    if marked[marked.len() - 1].0 - marked[0].0 >= period {
        return Err(Error::Config("marked parameters span a full period".into()));
    }
    let diam = curve
        .iter()
        .map(|p| p.dist(curve[0]))
        .fold(0.0, f64::max)
        .max(1.0);
    // Working copy; off-node marked points are spliced into the loop first.
    let mut loop_pts = curve.to_vec();
    for &(_, p) in marked {
        if loop_pts.contains(&p) {
            continue;
        }
        let mut split = None;
        for t in 0..loop_pts.len() {
            let (a, b) = (loop_pts[t], loop_pts[(t + 1) % loop_pts.len()]);
            if point_segment_distance(a, b, p) <= 1e-12 * diam {
                split = Some(t + 1);
                break;
            }
        }
        match split {
            Some(at) => loop_pts.insert(at, p),
            None => {
                return Err(Error::InvariantViolated(format!(
                    "marked point ({}, {}) is not on the curve",
                    p.x, p.y
                )))
            }
        }
    }
    let start = loop_pts.iter().position(|&q| q == marked[0].1).unwrap();
    let rot: Vec<Point2> = loop_pts[start..]
        .iter()
        .chain(&loop_pts[..start])
        .copied()
        .collect();
    let mut idx = Vec::with_capacity(marked.len());
    for &(_, p) in marked {
        let at = rot.iter().position(|&q| q == p).unwrap();
        idx.push(at);
    }
    for w in idx.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::InvariantViolated(
                "marked points appear out of cyclic order on the curve".into(),
            ));
        }
    }
    let m = marked.len();
    let mut pieces = Vec::with_capacity(m);
    let mut max_speed = 0.0f64;
    for t in 0..m {
        let chain: Vec<Point2> = if t + 1 < m {
            rot[idx[t]..=idx[t + 1]].to_vec()
        } else {
            rot[idx[t]..].iter().chain(&rot[..1]).copied().collect()
        };
        let (u0, u1) = if t + 1 < m {
            (marked[t].0, marked[t + 1].0)
        } else {
            (marked[t].0, marked[0].0 + period)
        };
        let line = PolyLine::new(chain)?;
        let pc = ParamCurve::new(line, u0, u1)?;
        max_speed = max_speed.max(pc.length() / (u1 - u0));
        pieces.push(pc);
    }
    Ok(CellParam { pieces, max_speed })
}

/// Runs the whole pipeline for a stack of consecutive-level grids: sample,
/// mark cross-level crossings, straighten each level (halving the ball
/// radius on ball failures, the clearance on tube failures, and both on
/// certification failures), then certify every consecutive pair, halving
/// both clearances and rebuilding on cross-level failures.
pub fn linearize_family(
    map: &BoundaryMap,
    grids: &[GoodGrid],
    per_side: usize,
) -> Result<Vec<PlGrid>> {
    if grids.is_empty() {
        return Err(Error::Config("no grids supplied".into()));
    }
    for w in grids.windows(2) {
        if w[1].level() != w[0].level() + 1 {
            return Err(Error::Config("grid levels must be consecutive and ascending".into()));
        }
    }
    let mut imgs: Vec<ImageGrid> = grids
        .iter()
        .map(|g| ImageGrid::sample(map, g, per_side))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..imgs.len().saturating_sub(1) {
        let (lo, hi) = imgs.split_at_mut(i + 1);
        mark_meets(map, &mut lo[i], &mut hi[0])?;
    }

    fn build_level(img: &ImageGrid, r0: f64, d0: f64) -> Result<(PlGrid, f64, f64)> {
        let (mut r, mut d) = (r0, d0);
        loop {
            if r < RADIUS_FLOOR || d < RADIUS_FLOOR {
                return Err(Error::ConstructionFailed(format!(
                    "level {}: radius/clearance underflow at r = {r}, delta = {d}",
                    img.level()
                )));
            }
            let radii = vec![r; img.vertex_images().len()];
            let cut = match linearize_vertices(img, &radii, r * 0.5) {
                Ok(g) => g,
                Err(_) => {
                    r *= 0.5;
                    continue;
                }
            };
            let pl = match linearize_sides(&cut, d) {
                Ok(p) => p,
                Err(_) => {
                    d *= 0.5;
                    continue;
                }
            };
            match pl.verify_level(img) {
                Ok(_) => return Ok((pl, r, d)),
                Err(_) => {
                    r *= 0.5;
                    d *= 0.5;
                }
            }
        }
    }

    let mut state: Vec<(PlGrid, f64, f64)> = Vec::with_capacity(imgs.len());
    for img in &imgs {
        let start = 2f64.powi(-(img.level() as i32)) / 8.0;
        state.push(build_level(img, start, start)?);
    }
    for _round in 0..60 {
        let mut failing = None;
        for i in 0..state.len().saturating_sub(1) {
            if preserve_cross_level(&state[i].0, &state[i + 1].0).is_err() {
                failing = Some(i);
                break;
            }
        }
        let Some(i) = failing else {
            return Ok(state.into_iter().map(|(pl, _, _)| pl).collect());
        };
        for t in [i, i + 1] {
            let (_, r, d) = state[t];
            state[t] = build_level(&imgs[t], r, d * 0.5)?;
        }
    }
    Err(Error::ConstructionFailed(
        "cross-level certification did not converge".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::uniform_family;
    use crate::dyadic::parent_children;
    use crate::maps::{AffineMap, CantorShear};
    use crate::plgeom::p2;
    use proptest::prelude::*;

    fn identity() -> BoundaryMap {
        BoundaryMap::Identity
    }

    fn cantor() -> BoundaryMap {
        BoundaryMap::CantorShear(CantorShear::new(3, 8).unwrap())
    }

    fn on_polyline(pts: &[Point2], p: Point2) -> bool {
        pts.windows(2)
            .any(|w| point_segment_distance(w[0], w[1], p) <= 1e-12)
    }

    #[test]
    fn identity_vertex_linearization_is_geometric_identity() {
        let g = uniform_family(2).unwrap().pop().unwrap();
        let img = ImageGrid::sample(&identity(), &g, 16).unwrap();
        let r = 2f64.powi(-2) / 8.0;
        let radii = vec![r; img.vertex_images().len()];
        let cut = linearize_vertices(&img, &radii, r * 0.5).unwrap();
        for (s, side) in cut.sides().iter().enumerate() {
            let orig = &img.sides()[s];
            assert_eq!(side.points[0], orig.points[0]);
            assert_eq!(side.points.last(), orig.points.last());
            for &p in &side.points {
                assert!(on_polyline(&orig.points, p), "node left the original side");
            }
            let (a, b) = (side.length(), orig.length());
            assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn cantor_vertex_linearization_cuts_simple_germs() {
        let g = uniform_family(2).unwrap().pop().unwrap();
        let img = ImageGrid::sample(&cantor(), &g, 32).unwrap();
        let mut r = 2f64.powi(-2) / 8.0;
        let cut = loop {
            let radii = vec![r; img.vertex_images().len()];
            match linearize_vertices(&img, &radii, r * 0.5) {
                Ok(c) => break c,
                Err(_) => r *= 0.5,
            }
        };
        let mut germs = 0;
        for (s, side) in cut.sides().iter().enumerate() {
            polyline_simple(&side.points).unwrap();
            // The first node after an endpoint sits exactly on the cut circle.
            let d0 = side.points[0].dist(side.points[1]);
            let dn = side.points[side.points.len() - 1]
                .dist(side.points[side.points.len() - 2]);
            assert!((d0 - r).abs() <= 1e-9 * r, "side {s}: germ start off circle");
            assert!((dn - r).abs() <= 1e-9 * r, "side {s}: germ end off circle");
            germs += 2;
        }
        assert_eq!(germs, 2 * cut.sides().len());
    }

    #[test]
    fn straight_sides_collapse_to_chords() {
        let g = uniform_family(2).unwrap().pop().unwrap();
        let img = ImageGrid::sample(&identity(), &g, 16).unwrap();
        let r = 2f64.powi(-2) / 8.0;
        let radii = vec![r; img.vertex_images().len()];
        let cut = linearize_vertices(&img, &radii, r * 0.5).unwrap();
        let pl = linearize_sides(&cut, r).unwrap();
        for (s, side) in pl.sides().iter().enumerate() {
            assert!(side.points.len() <= 4, "side {s} kept {} nodes", side.points.len());
            let orig = &img.sides()[s];
            for &p in &side.points {
                assert!(on_polyline(&orig.points, p));
            }
            let (a, b) = (side.length(), orig.length());
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
        pl.verify_level(&img).unwrap();
    }

    #[test]
    fn inscribed_quarter_circle_stays_within_tolerance_and_shortens() {
        let pts: Vec<Point2> = (0..=64)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / 64.0;
                p2(a.cos(), a.sin())
            })
            .collect();
        let tol = 0.05;
        let out = inscribe(&pts, tol);
        assert!(out.len() < pts.len());
        assert_eq!(out[0], pts[0]);
        assert_eq!(*out.last().unwrap(), *pts.last().unwrap());
        let arc: f64 = pts.windows(2).map(|w| w[0].dist(w[1])).sum();
        let chord: f64 = out.windows(2).map(|w| w[0].dist(w[1])).sum();
        assert!(chord < arc);
        for &p in &pts {
            let d = out
                .windows(2)
                .map(|w| point_segment_distance(w[0], w[1], p))
                .fold(f64::INFINITY, f64::min);
            assert!(d <= tol, "dropped sample strayed {d} from the inscription");
        }
    }

    #[test]
    fn self_crossing_polyline_reroutes_to_simple_shorter_path() {
        let pts = vec![
            p2(0.0, 0.0),
            p2(3.0, 0.0),
            p2(3.0, 1.0),
            p2(1.0, 1.0),
            p2(1.0, -0.5),
            p2(0.5, -0.5),
        ];
        assert!(polyline_simple(&pts).is_err());
        let old: f64 = pts.windows(2).map(|w| w[0].dist(w[1])).sum();
        let out = simple_or_reroute(pts.clone()).unwrap();
        polyline_simple(&out).unwrap();
        assert_eq!(out[0], pts[0]);
        assert_eq!(*out.last().unwrap(), *pts.last().unwrap());
        let new: f64 = out.windows(2).map(|w| w[0].dist(w[1])).sum();
        assert!(new < old, "{new} vs {old}");
        // The only useful shortcut runs through the crossing at (1, 0).
        assert!(out.contains(&p2(1.0, 0.0)));
    }

    #[test]
    fn cross_level_meets_identity_counts_and_octagon_subset() {
        let fam = uniform_family(3).unwrap();
        let (g2, g3) = (&fam[1], &fam[2]);
        let meets = cross_level_meets(g2, g3).unwrap();
        // The levels cover slightly offset squares: the outermost coarse line
        // sits beyond the fine lines' reach and the first fine line below the
        // coarse ones (the shift windows order s_{k+1}/2 < s_k), so each of
        // the n_c interior coarse lines crosses each of the n_f reachable
        // perpendicular fine lines exactly once, per orientation: 2*4*8.
        assert_eq!(meets.len(), 2 * 4 * 8);
        for (i, j) in g2.cells() {
            let pc = parent_children(g2, g3, i, j).unwrap();
            for &m in &pc.meet {
                let hit = meets.iter().any(|c| c.point.dist(m) <= 1e-9);
                assert!(hit, "octagon meet {m:?} missing from the skeleton crossings");
            }
        }
    }

    #[test]
    fn linearize_family_identity_pair_certifies_with_all_marks() {
        let fam = uniform_family(3).unwrap();
        let grids = &fam[1..=2];
        let pls = linearize_family(&identity(), grids, 12).unwrap();
        let rep = preserve_cross_level(&pls[0], &pls[1]).unwrap();
        assert_eq!(rep.marked, 64);
        assert_eq!(rep.touches, 4 * 64);
        // Shared subarcs are bitwise identical across adjacent cells.
        let n = pls[1].grid().n();
        let shared = &pls[1].sides()[v_side(n, 1, 0)].points;
        let left = pls[1].cell_curve(0, 0);
        let right = pls[1].cell_curve(1, 0);
        for p in shared {
            assert!(left.contains(p) && right.contains(p));
        }
        for pl in &pls {
            for (i, j) in pl.grid().cells() {
                assert!(pl.cell_marked(i, j).len() <= 14);
                pl.cell_polygon(i, j).unwrap();
            }
        }
    }

    #[test]
    fn linearize_family_affine_matches_identity_mark_count() {
        let fam = uniform_family(3).unwrap();
        let map = BoundaryMap::Affine(AffineMap {
            lin: [[1.2, 0.3], [-0.1, 0.9]],
            off: [0.2, -0.4],
        });
        let pls = linearize_family(&map, &fam[1..=2], 12).unwrap();
        let rep = preserve_cross_level(&pls[0], &pls[1]).unwrap();
        assert_eq!(rep.marked, 64);
    }

    #[test]
    fn linearize_family_cantor_pair_certifies_with_straight_images() {
        let fam = uniform_family(3).unwrap();
        let pls = linearize_family(&cantor(), &fam[1..=2], 24).unwrap();
        let rep = preserve_cross_level(&pls[0], &pls[1]).unwrap();
        assert_eq!(rep.marked, 64);
        // The shear moves points only along x, so every side image is a
        // straight segment however wildly it is reparametrized: lengths must
        // survive exactly and the kinked samples must collapse to chords.
        let imgs: Vec<ImageGrid> = fam[1..=2]
            .iter()
            .map(|g| ImageGrid::sample(&cantor(), g, 24).unwrap())
            .collect();
        for (pl, img) in pls.iter().zip(&imgs) {
            for (s, side) in pl.sides().iter().enumerate() {
                let ol = img.sides()[s].length();
                assert!((side.length() - ol).abs() <= 1e-9 * ol);
                // Per stretch: two germ-crossing nodes plus the chord, so a
                // side with m marks keeps at most (m + 2) + 2(m + 1) nodes.
                assert!(side.points.len() <= 4 + 3 * side.marks.len());
            }
        }
    }

    #[test]
    fn linearize_family_smooth_warp_inscribes_curved_sides() {
        let fam = uniform_family(3).unwrap();
        let map = BoundaryMap::SmoothWarp { amp: 0.1 };
        let pls = linearize_family(&map, &fam[1..=2], 24).unwrap();
        preserve_cross_level(&pls[0], &pls[1]).unwrap();
        let imgs: Vec<ImageGrid> = fam[1..=2]
            .iter()
            .map(|g| ImageGrid::sample(&map, g, 24).unwrap())
            .collect();
        let mut shortened = false;
        for (pl, img) in pls.iter().zip(&imgs) {
            let rep = pl.verify_level(img).unwrap();
            assert!(rep.max_deviation <= 2f64.powi(-(pl.level() as i32)));
            assert!(rep.max_length_ratio <= 1.0 + 1e-9);
            for (s, side) in pl.sides().iter().enumerate() {
                if side.length() < img.sides()[s].length() * (1.0 - 1e-9) {
                    shortened = true;
                }
            }
        }
        assert!(shortened, "warped sides should lose length when inscribed");
    }

    #[test]
    fn parametrize_square_four_pieces_exact_speeds() {
        let sq = [p2(0.0, 0.0), p2(1.0, 0.0), p2(1.0, 1.0), p2(0.0, 1.0)];
        let marked: Vec<(f64, Point2)> =
            sq.iter().enumerate().map(|(i, &p)| (i as f64 * 0.25, p)).collect();
        let cp = parametrize(&sq, &marked, 1.0).unwrap();
        assert_eq!(cp.pieces.len(), 4);
        for (i, pc) in cp.pieces.iter().enumerate() {
            let (u0, u1) = pc.domain();
            assert_eq!(u1 - u0, 0.25);
            assert_eq!(pc.length(), 1.0);
            assert_eq!(pc.eval(u0).unwrap(), sq[i]);
        }
        assert_eq!(cp.max_speed, 4.0);
    }

    #[test]
    fn parametrize_rejects_bad_marked_inputs() {
        let hexa: Vec<Point2> = (0..15)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 15.0;
                p2(a.cos(), a.sin())
            })
            .collect();
        let marked15: Vec<(f64, Point2)> = hexa
            .iter()
            .enumerate()
            .map(|(i, &p)| (i as f64 / 15.0, p))
            .collect();
        assert!(parametrize(&hexa, &marked15, 1.0).is_err());
        let sq = [p2(0.0, 0.0), p2(1.0, 0.0), p2(1.0, 1.0), p2(0.0, 1.0)];
        let off = vec![(0.0, sq[0]), (0.5, p2(2.0, 2.0))];
        assert!(matches!(
            parametrize(&sq, &off, 1.0),
            Err(Error::InvariantViolated(_))
        ));
        let disorder = vec![(0.0, sq[0]), (0.25, sq[2]), (0.5, sq[1])];
        assert!(parametrize(&sq, &disorder, 1.0).is_err());
        // A marked point interior to an edge is spliced in, not rejected.
        let mid = vec![(0.0, sq[0]), (0.125, p2(0.5, 0.0)), (0.5, sq[2])];
        let cp = parametrize(&sq, &mid, 1.0).unwrap();
        assert_eq!(cp.pieces.len(), 3);
    }

    #[test]
    fn identity_level_three_speed_ratio_is_within_recorded_bound() {
        let fam = uniform_family(3).unwrap();
        let pls = linearize_family(&identity(), &fam[1..=2], 12).unwrap();
        let pl = &pls[1];
        let mut worst = 0.0f64;
        for (i, j) in pl.grid().cells() {
            let cp = pl.cell_parametrization(i, j).unwrap();
            let curve = pl.cell_curve(i, j);
            let mut h1 = 0.0;
            for t in 0..curve.len() {
                h1 += curve[t].dist(curve[(t + 1) % curve.len()]);
            }
            worst = worst.max(cp.max_speed / (h1 * 2f64.powi(3)));
        }
        assert!(worst <= SPEED_RATIO_RECORDED, "ratio {worst}");
        assert!(worst <= 14.0);
        // Identity cells run at unit speed, so the ratio is 1 / perimeter-ish.
        assert!(worst < 1.0, "identity ratio unexpectedly large: {worst}");
    }

    #[test]
    fn plgrid_json_roundtrip_keeps_counts() {
        let fam = uniform_family(2).unwrap();
        let pls = linearize_family(&cantor(), &fam[..=1], 12).unwrap();
        let js = pls[1].to_json();
        let text = serde_json::to_string(&js).unwrap();
        let back: PlGridJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back.level, pls[1].level());
        assert_eq!(back.sides.len(), pls[1].sides().len());
        assert_eq!(back.cells.len(), 16);
        for cell in &back.cells {
            assert!(!cell.breakpoints.is_empty());
            for w in cell.breakpoints.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn parametrize_covers_random_polygons(
            n in 3usize..12,
            mask in 1u32..4096,
            rot in 0.0f64..std::f64::consts::TAU,
        ) {
            let poly: Vec<Point2> = (0..n)
                .map(|i| {
                    let a = rot + std::f64::consts::TAU * i as f64 / n as f64;
                    p2(a.cos(), a.sin())
                })
                .collect();
            let mut marked: Vec<(f64, Point2)> = (0..n)
                .filter(|i| mask & (1 << (i % 12)) != 0)
                .map(|i| (i as f64 / n as f64, poly[i]))
                .collect();
            if marked.is_empty() {
                marked.push((0.0, poly[0]));
            }
            let cp = parametrize(&poly, &marked, 1.0).unwrap();
            prop_assert_eq!(cp.pieces.len(), marked.len());
            let perimeter: f64 = (0..n)
                .map(|i| poly[i].dist(poly[(i + 1) % n]))
                .sum();
            let total: f64 = cp.pieces.iter().map(|p| p.length()).sum();
            prop_assert!((total - perimeter).abs() <= 1e-9 * perimeter);
            for (t, pc) in cp.pieces.iter().enumerate() {
                let (u0, u1) = pc.domain();
                prop_assert!(pc.length() / (u1 - u0) <= cp.max_speed * (1.0 + 1e-12));
                prop_assert_eq!(pc.eval(u0).unwrap(), marked[t].1);
            }
        }
    }
}
