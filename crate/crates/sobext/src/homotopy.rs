//! Controlled planar homotopies between PL curves and loops.
//!
//! Three mechanisms build on each other. A [`HalfFixedHomotopy`] sweeps
//! between two simple arcs that share both endpoints by walking a junction
//! point along one arc and closing with a geodesic in the lens bounded by
//! the arcs; a small wake displacement keeps distinct time slices disjoint.
//! A [`CrossDeform`] migrates the center of a four-arm cross along the
//! track traced by a half-fixed family, dragging the two passive arms
//! behind the moving center along slit walls. A [`GridLevelHomotopy`]
//! composes eight half-fixed stages to carry a marked quadrilateral loop
//! onto its refinement at the next grid level: four corner stages reroute
//! each corner wedge through the target corner, four side stages then land
//! the rerouted sides on the target sides.
//!
//! Every constructor checks its geometric preconditions and every sampled
//! curve is revalidated; when a separation parameter cannot be tuned the
//! constructors fail with an error instead of returning a curve that
//! self-intersects.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geodesic::shortest_path;
use crate::plgeom::{
    orient2d, p2, point_segment_distance, points_diameter, segments_intersect, JordanPolygon,
    Orientation, ParamCurve, Point2, PointLocation, PolyLine, SegmentMeet,
};

fn key(p: Point2) -> (u64, u64) {
    let bits = |v: f64| if v == 0.0 { 0u64 } else { v.to_bits() };
    (bits(p.x), bits(p.y))
}

fn dedup_pts(pts: &[Point2]) -> Vec<Point2> {
    let mut out: Vec<Point2> = Vec::with_capacity(pts.len());
    for &p in pts {
        if out.last().map(|q| key(*q)) != Some(key(p)) {
            out.push(p);
        }
    }
    out
}

fn chain_len(pts: &[Point2]) -> f64 {
    pts.windows(2).map(|w| w[0].dist(w[1])).sum()
}

fn cum_lens(pts: &[Point2]) -> Vec<f64> {
    let mut out = Vec::with_capacity(pts.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in pts.windows(2) {
        acc += w[0].dist(w[1]);
        out.push(acc);
    }
    out
}

fn unit_or_zero(v: Point2) -> Point2 {
    let n = v.norm();
    if n > 0.0 {
        v * (1.0 / n)
    } else {
        p2(0.0, 0.0)
    }
}

/// Closes an open loop by appending the first point when needed.
fn closed_chain(pts: &[Point2]) -> Vec<Point2> {
    let mut out = pts.to_vec();
    if out.len() >= 2 && key(out[0]) != key(*out.last().unwrap()) {
        out.push(out[0]);
    }
    out
}

/// Signed area of an open loop; positive when counterclockwise.
fn shoelace(pts: &[Point2]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        acc += a.cross(b);
    }
    acc / 2.0
}

fn chain_simple(pts: &[Point2]) -> bool {
    match PolyLine::new(pts.to_vec()) {
        Ok(pl) => pl.is_simple(),
        Err(_) => false,
    }
}

fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    if orient2d(a, b, p) != Orientation::Collinear {
        return false;
    }
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Endpoints of either segment that lie on the other one.
fn touch_points(a1: Point2, a2: Point2, b1: Point2, b2: Point2) -> Vec<Point2> {
    let mut out: Vec<Point2> = Vec::new();
    for p in [b1, b2] {
        if on_segment(a1, a2, p) {
            out.push(p);
        }
    }
    for p in [a1, a2] {
        if on_segment(b1, b2, p) {
            out.push(p);
        }
    }
    let mut seen = Vec::new();
    out.retain(|p| {
        let k = key(*p);
        if seen.contains(&k) {
            false
        } else {
            seen.push(k);
            true
        }
    });
    out
}

fn cross_witness(a1: Point2, a2: Point2, b1: Point2, b2: Point2) -> Point2 {
    let d1 = a2 - a1;
    let d2 = b2 - b1;
    let den = d1.cross(d2);
    if den == 0.0 {
        return a1;
    }
    let t = ((b1 - a1).cross(d2) / den).clamp(0.0, 1.0);
    a1 + d1 * t
}

/// First forbidden contact between two chains, or None. Contacts at the
/// listed points are allowed; transversal crossings and overlaps never are.
fn chains_meet(a: &[Point2], b: &[Point2], allowed: &[Point2]) -> Result<Option<Point2>> {
    let ok = |p: Point2| allowed.iter().any(|q| key(*q) == key(p));
    for wa in a.windows(2) {
        if key(wa[0]) == key(wa[1]) {
            continue;
        }
        for wb in b.windows(2) {
            if key(wb[0]) == key(wb[1]) {
                continue;
            }
            match segments_intersect(wa[0], wa[1], wb[0], wb[1])? {
                SegmentMeet::Disjoint => {}
                SegmentMeet::InteriorCross => {
                    return Ok(Some(cross_witness(wa[0], wa[1], wb[0], wb[1])));
                }
                SegmentMeet::Overlap => {
                    let tp = touch_points(wa[0], wa[1], wb[0], wb[1]);
                    let w = if tp.is_empty() {
                        wa[0]
                    } else {
                        let mut s = p2(0.0, 0.0);
                        for p in &tp {
                            s = s + *p;
                        }
                        s * (1.0 / tp.len() as f64)
                    };
                    return Ok(Some(w));
                }
                SegmentMeet::EndpointTouch => {
                    for p in touch_points(wa[0], wa[1], wb[0], wb[1]) {
                        if !ok(p) {
                            return Ok(Some(p));
                        }
                    }
                }
            }
        }
    }
    Ok(None)
}

/// Unit direction at vertex i of a counterclockwise loop pointing into the
/// enclosed region; works at both convex and reflex vertices.
fn inward_bisector(verts: &[Point2], i: usize) -> Point2 {
    let n = verts.len();
    let pt = verts[i];
    let prev = verts[(i + n - 1) % n];
    let next = verts[(i + 1) % n];
    let u = unit_or_zero(prev - pt);
    let v = unit_or_zero(next - pt);
    let left = unit_or_zero(unit_or_zero(next - prev).perp());
    let w = u + v;
    let wn = w.norm();
    if !(wn > 1e-12) {
        return left;
    }
    let w = w * (1.0 / wn);
    let d = w.dot(left);
    if d > 0.0 {
        w
    } else if d < 0.0 {
        -w
    } else {
        left
    }
}

/// Distance from vertex i to the nearest non-incident edge of the loop.
fn vertex_clearance(verts: &[Point2], i: usize) -> f64 {
    let n = verts.len();
    let mut best = f64::INFINITY;
    for j in 0..n {
        if j == i || j == (i + n - 1) % n {
            continue;
        }
        let a = verts[j];
        let b = verts[(j + 1) % n];
        best = best.min(point_segment_distance(a, b, verts[i]));
    }
    best
}

fn nearest_on_segment(a: Point2, b: Point2, p: Point2) -> Point2 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Nearest boundary point of a loop: (distance, point, edge index).
fn nearest_on_loop(verts: &[Point2], p: Point2) -> (f64, Point2, usize) {
    let n = verts.len();
    let mut best = (f64::INFINITY, verts[0], 0);
    for j in 0..n {
        let a = verts[j];
        let b = verts[(j + 1) % n];
        let q = nearest_on_segment(a, b, p);
        let d = p.dist(q);
        if d < best.0 {
            best = (d, q, j);
        }
    }
    best
}

/// Obstacle chain plus the points where contact with it is allowed.
type Avoid<'a> = (&'a [Point2], &'a [Point2]);

fn edge_blocked(a: Point2, b: Point2, obstacles: &[Avoid<'_>]) -> Result<bool> {
    if key(a) == key(b) {
        return Ok(true);
    }
    for (chain, allowed) in obstacles {
        for w in chain.windows(2) {
            if key(w[0]) == key(w[1]) {
                continue;
            }
            match segments_intersect(a, b, w[0], w[1])? {
                SegmentMeet::Disjoint => {}
                SegmentMeet::InteriorCross | SegmentMeet::Overlap => return Ok(true),
                SegmentMeet::EndpointTouch => {
                    for p in touch_points(a, b, w[0], w[1]) {
                        if !allowed.iter().any(|q| key(*q) == key(p)) {
                            return Ok(true);
                        }
                    }
                }
            }
        }
    }
    Ok(false)
}

/// Shortest PL route from `from` to `to` that crosses none of the obstacle
/// chains and touches them only at the allowed points. Candidate bend sites
/// are obstacle vertices pushed off both sides of their chains; the offset
/// and the search radius around `hint` are retuned until a simple route
/// exists.
fn route_avoiding(
    from: Point2,
    to: Point2,
    obstacles: &[Avoid<'_>],
    hint: Point2,
    radius: f64,
    scale: f64,
) -> Result<Vec<Point2>> {
    if key(from) == key(to) {
        return Err(Error::DegenerateInput(
            "route endpoints must be distinct".into(),
        ));
    }
    if !(radius > 0.0) || !(scale > 0.0) {
        return Err(Error::DegenerateInput(
            "route radius and scale must be positive".into(),
        ));
    }
    for rad_mul in [1.0, 2.0, 4.0] {
        let r = radius * rad_mul;
        for halve in 0..8 {
            let rho = scale * 2f64.powi(-(6 + halve));
            if let Some(path) = try_route(from, to, obstacles, hint, r, rho)? {
                if chain_simple(&path) {
                    return Ok(path);
                }
            }
        }
    }
    Err(Error::ConstructionFailed(format!(
        "could not route an auxiliary curve from ({:.4}, {:.4}) to ({:.4}, {:.4})",
        from.x, from.y, to.x, to.y
    )))
}

fn try_route(
    from: Point2,
    to: Point2,
    obstacles: &[Avoid<'_>],
    hint: Point2,
    radius: f64,
    rho: f64,
) -> Result<Option<Vec<Point2>>> {
    let mut nodes = vec![from, to];
    let mut seen: Vec<(u64, u64)> = vec![key(from), key(to)];
    let push = |nodes: &mut Vec<Point2>, seen: &mut Vec<(u64, u64)>, p: Point2| {
        if p.is_finite() && !seen.contains(&key(p)) {
            seen.push(key(p));
            nodes.push(p);
        }
    };
    for (chain, _) in obstacles {
        let cyc = chain.len() >= 3 && key(chain[0]) == key(chain[chain.len() - 1]);
        let m = if cyc { chain.len() - 1 } else { chain.len() };
        for i in 0..m {
            let v = chain[i];
            if v.dist(hint) > radius {
                continue;
            }
            let prev = if i > 0 {
                Some(chain[i - 1])
            } else if cyc {
                Some(chain[m - 1])
            } else {
                None
            };
            let next = if i + 1 < chain.len() {
                Some(chain[i + 1])
            } else {
                None
            };
            match (prev, next) {
                (Some(pr), Some(nx)) => {
                    let u = unit_or_zero(pr - v);
                    let w = unit_or_zero(nx - v);
                    let s = u + w;
                    let dirs = if s.norm() < 1e-9 {
                        let t = unit_or_zero(unit_or_zero(nx - pr).perp());
                        [t, -t]
                    } else {
                        let b = unit_or_zero(s);
                        [b, -b]
                    };
                    for d in dirs {
                        push(&mut nodes, &mut seen, v + d * rho);
                    }
                }
                (Some(nb), None) | (None, Some(nb)) => {
                    let d = unit_or_zero(v - nb);
                    let q = d.perp();
                    for dd in [d, q, -q] {
                        push(&mut nodes, &mut seen, v + dd * rho);
                    }
                }
                _ => {}
            }
        }
    }
    let n = nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    dist[0] = 0.0;
    loop {
        let mut cur = usize::MAX;
        let mut best = f64::INFINITY;
        for (k, d) in dist.iter().enumerate() {
            if !done[k] && *d < best {
                best = *d;
                cur = k;
            }
        }
        if cur == usize::MAX || cur == 1 {
            break;
        }
        done[cur] = true;
        for next in 0..n {
            if done[next] {
                continue;
            }
            let nd = dist[cur] + nodes[cur].dist(nodes[next]);
            if nd < dist[next] && !edge_blocked(nodes[cur], nodes[next], obstacles)? {
                dist[next] = nd;
                prev[next] = cur;
            }
        }
    }
    if dist[1].is_infinite() {
        return Ok(None);
    }
    let mut path = vec![nodes[1]];
    let mut at = 1;
    while at != 0 {
        at = prev[at];
        path.push(nodes[at]);
    }
    path.reverse();
    Ok(Some(dedup_pts(&path)))
}

/// Piecewise curve over a parameter interval, assembled from consecutive
/// arclength-parametrized pieces.
#[derive(Debug, Clone)]
pub struct ParamPath {
    pieces: Vec<ParamCurve>,
}

impl ParamPath {
    fn from_parts(parts: Vec<(Vec<Point2>, f64, f64)>) -> Result<ParamPath> {
        if parts.is_empty() {
            return Err(Error::DegenerateInput("empty parametrized path".into()));
        }
        let mut pieces = Vec::with_capacity(parts.len());
        for (pts, t0, t1) in parts {
            let pl = PolyLine::new(dedup_pts(&pts))?;
            pieces.push(ParamCurve::new(pl, t0, t1)?);
        }
        for w in pieces.windows(2) {
            if w[0].domain().1 != w[1].domain().0 {
                return Err(Error::InvariantViolated(
                    "parametrized path pieces must cover consecutive intervals".into(),
                ));
            }
        }
        Ok(ParamPath { pieces })
    }

    pub fn domain(&self) -> (f64, f64) {
        (
            self.pieces.first().unwrap().domain().0,
            self.pieces.last().unwrap().domain().1,
        )
    }

    pub fn eval(&self, s: f64) -> Result<Point2> {
        let (lo, hi) = self.domain();
        let s = s.clamp(lo, hi);
        for pc in &self.pieces {
            let (a, b) = pc.domain();
            if s <= b {
                return pc.eval(s.max(a));
            }
        }
        self.pieces.last().unwrap().eval(hi)
    }

    pub fn max_speed(&self) -> f64 {
        let mut best = 0.0f64;
        for pc in &self.pieces {
            let (a, b) = pc.domain();
            if b > a {
                best = best.max(pc.length() / (b - a));
            }
        }
        best
    }

    /// Splits the node chain at parameter `s`; the split point is shared by
    /// both halves and is an exact node when `s` hits one.
    pub fn split_at(&self, s: f64) -> (Vec<Point2>, Vec<Point2>) {
        let mut left: Vec<Point2> = Vec::new();
        let mut right: Vec<Point2> = Vec::new();
        let push = |side: &mut Vec<Point2>, p: Point2| {
            if side.last().map(|q| key(*q)) != Some(key(p)) {
                side.push(p);
            }
        };
        for pc in &self.pieces {
            let (t0, t1) = pc.domain();
            let pts = pc.line().points();
            if t1 <= s {
                for &p in pts {
                    push(&mut left, p);
                }
            } else if t0 >= s {
                for &p in pts {
                    push(&mut right, p);
                }
            } else {
                let total = pc.length();
                let u = (s - t0) / (t1 - t0) * total;
                let cum = cum_lens(pts);
                let mut idx = 0;
                while idx + 1 < cum.len() && cum[idx + 1] <= u {
                    idx += 1;
                }
                let q = if cum[idx] == u || idx + 1 >= pts.len() {
                    pts[idx]
                } else {
                    let seg = cum[idx + 1] - cum[idx];
                    pts[idx].lerp(pts[idx + 1], ((u - cum[idx]) / seg).clamp(0.0, 1.0))
                };
                for &p in &pts[..=idx] {
                    push(&mut left, p);
                }
                push(&mut left, q);
                push(&mut right, q);
                if idx + 1 < pts.len() {
                    for &p in &pts[idx + 1..] {
                        push(&mut right, p);
                    }
                }
            }
        }
        (left, right)
    }
}

struct RawCurve {
    nodes: Vec<Point2>,
    junction: usize,
    junction_edge: Option<(Point2, Point2)>,
    on_gamma0: bool,
}

/// Homotopy between two simple arcs sharing both endpoints. At time t the
/// curve keeps a shrinking prefix of the start arc (growing prefix of the
/// end arc past t = 1/2) and closes with a geodesic in the lens bounded by
/// the two arcs; interior nodes ride a small inward wake displacement whose
/// side-dependent factors t and 1 - t keep distinct time slices disjoint.
#[derive(Debug, Clone)]
pub struct HalfFixedHomotopy {
    gamma0: Vec<Point2>,
    gamma1: Vec<Point2>,
    anchor0: Option<usize>,
    anchor1: Option<usize>,
    region: Option<JordanPolygon>,
    site_dir: HashMap<(u64, u64), Point2>,
    site_on_gamma0: HashMap<(u64, u64), bool>,
    g0_interior_left: bool,
    eps: f64,
    diam: f64,
    lipschitz: f64,
    constant: bool,
    mid: Vec<Point2>,
}

impl HalfFixedHomotopy {
    pub fn new(gamma0: &[Point2], gamma1: &[Point2]) -> Result<Self> {
        Self::build(gamma0, gamma1, None, None)
    }

    /// Like `new`, but pins the given interior node of each arc to the
    /// parameter value 1/2 of the moving curve.
    pub fn with_anchors(
        gamma0: &[Point2],
        gamma1: &[Point2],
        anchor0: usize,
        anchor1: usize,
    ) -> Result<Self> {
        Self::build(gamma0, gamma1, Some(anchor0), Some(anchor1))
    }

    fn build(
        gamma0: &[Point2],
        gamma1: &[Point2],
        anchor0: Option<usize>,
        anchor1: Option<usize>,
    ) -> Result<Self> {
        let g0 = dedup_pts(gamma0);
        let g1 = dedup_pts(gamma1);
        if g0.len() < 2 || g1.len() < 2 {
            return Err(Error::DegenerateInput(
                "each homotopy arc needs at least two distinct points".into(),
            ));
        }
        let a = g0[0];
        let b = *g0.last().unwrap();
        if key(a) != key(g1[0]) || key(b) != key(*g1.last().unwrap()) {
            return Err(Error::DegenerateInput(
                "homotopy arcs must share both endpoints exactly".into(),
            ));
        }
        if key(a) == key(b) {
            return Err(Error::DegenerateInput(
                "homotopy arcs must have two distinct endpoints".into(),
            ));
        }
        for (anchor, len) in [(anchor0, g0.len()), (anchor1, g1.len())] {
            if let Some(ai) = anchor {
                if ai == 0 || ai + 1 >= len {
                    return Err(Error::DegenerateInput(
                        "homotopy anchors must be interior nodes".into(),
                    ));
                }
            }
        }
        let norm0 = end_speed(&g0, anchor0);
        let norm1 = end_speed(&g1, anchor1);
        let mut out = HalfFixedHomotopy {
            gamma0: g0.clone(),
            gamma1: g1.clone(),
            anchor0,
            anchor1,
            region: None,
            site_dir: HashMap::new(),
            site_on_gamma0: HashMap::new(),
            g0_interior_left: false,
            eps: 0.0,
            diam: 0.0,
            lipschitz: norm0.max(norm1),
            constant: false,
            mid: Vec::new(),
        };
        if g0.len() == g1.len() && g0.iter().zip(&g1).all(|(p, q)| key(*p) == key(*q)) {
            out.constant = true;
            out.mid = g0;
            return Ok(out);
        }
        if !chain_simple(&g0) || !chain_simple(&g1) {
            return Err(Error::NonSimple(
                "homotopy arcs must be simple curves".into(),
            ));
        }
        if let Some(w) = chains_meet(&g0, &g1, &[a, b])? {
            return Err(Error::DegenerateInput(format!(
                "curves meet away from their shared endpoints near ({:.6}, {:.6})",
                w.x, w.y
            )));
        }
        let mut loop_pts = g0.clone();
        if g1.len() > 2 {
            loop_pts.extend(g1[1..g1.len() - 1].iter().rev());
        }
        out.g0_interior_left = shoelace(&loop_pts) > 0.0;
        let region = JordanPolygon::new(loop_pts).map_err(|e| {
            Error::DegenerateInput(format!("homotopy arcs bound no usable region: {e}"))
        })?;
        let g0_keys: Vec<(u64, u64)> = g0.iter().map(|p| key(*p)).collect();
        let verts = region.verts().to_vec();
        let mut clear = f64::INFINITY;
        for (i, v) in verts.iter().enumerate() {
            let k = key(*v);
            if k == key(a) || k == key(b) {
                continue;
            }
            out.site_dir.insert(k, inward_bisector(&verts, i));
            out.site_on_gamma0.insert(k, g0_keys.contains(&k));
        }
        for i in 0..verts.len() {
            clear = clear.min(vertex_clearance(&verts, i));
        }
        out.region = Some(region);
        let diam = points_diameter(&verts);
        out.diam = diam;
        let mut eps = (clear / 3.0).min(diam * 2f64.powi(-20));
        if !(eps > 0.0) {
            eps = diam * 2f64.powi(-20);
        }
        out.eps = eps;
        let mut separated = false;
        for _ in 0..=40 {
            if out.family_ok()? {
                separated = true;
                break;
            }
            out.eps /= 2.0;
        }
        if !separated {
            return Err(Error::ConstructionFailed(format!(
                "could not separate the half-fixed family; last node spacing {:.3e}",
                out.eps
            )));
        }
        out.mid = out.star_nodes(0.5)?;
        Ok(out)
    }

    fn family_ok(&self) -> Result<bool> {
        let region = self.region.as_ref().unwrap();
        let a = self.gamma0[0];
        let b = *self.gamma0.last().unwrap();
        let mut curves = Vec::new();
        for k in 0..=12 {
            let t = k as f64 / 12.0;
            let pts = dedup_pts(&self.star_nodes(t)?);
            if !chain_simple(&pts) {
                eprintln!("family_ok: curve {k} not simple: {pts:?}");
                return Ok(false);
            }
            for w in pts.windows(2) {
                let m = w[0].lerp(w[1], 0.5);
                if region.locate(m) == PointLocation::Outside {
                    eprintln!("family_ok: curve {k} midpoint {m:?} outside");
                    return Ok(false);
                }
            }
            for p in &pts {
                if region.locate(*p) == PointLocation::Outside {
                    eprintln!("family_ok: curve {k} node {p:?} outside");
                    return Ok(false);
                }
            }
            curves.push(pts);
        }
        for i in 0..curves.len() {
            for j in i + 1..curves.len() {
                if let Some(w) = chains_meet(&curves[i], &curves[j], &[a, b])? {
                    eprintln!("family_ok: curves {i} {j} meet at {w:?}");
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    fn raw_curve(&self, t: f64) -> Result<RawCurve> {
        let on0 = t <= 0.5;
        let base = if on0 { &self.gamma0 } else { &self.gamma1 };
        let anchor = if on0 { self.anchor0 } else { self.anchor1 };
        let p = if on0 { 1.0 - 2.0 * t } else { 2.0 * t - 1.0 };
        let cum = cum_lens(base);
        let total = *cum.last().unwrap();
        let target = match anchor {
            None => p * total,
            Some(ai) => {
                let ca = cum[ai];
                if p <= 0.5 {
                    2.0 * p * ca
                } else {
                    ca + (2.0 * p - 1.0) * (total - ca)
                }
            }
        };
        let mut i = 0;
        while i + 2 < cum.len() && cum[i + 1] < target {
            i += 1;
        }
        let seg = cum[i + 1] - cum[i];
        let frac = if seg > 0.0 {
            ((target - cum[i]) / seg).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (mut nodes, junction, junction_edge) = if frac <= 0.0 {
            (base[..=i].to_vec(), i, None)
        } else if frac >= 1.0 {
            (base[..=i + 1].to_vec(), i + 1, None)
        } else {
            let q = base[i].lerp(base[i + 1], frac);
            if key(q) == key(base[i]) {
                (base[..=i].to_vec(), i, None)
            } else if key(q) == key(base[i + 1]) {
                (base[..=i + 1].to_vec(), i + 1, None)
            } else {
                let mut n = base[..=i].to_vec();
                n.push(q);
                (n, i + 1, Some((base[i], base[i + 1])))
            }
        };
        let bpt = *base.last().unwrap();
        let jpt = nodes[junction];
        if key(jpt) != key(bpt) {
            let region = self.region.as_ref().unwrap();
            let mut attempt = shortest_path(region, jpt, bpt);
            if attempt.is_err() {
                // A mid-edge junction is a componentwise lerp and need not
                // be exactly collinear with its edge, so the robust locate
                // can see it a few ulps outside. Funnel from a point pulled
                // just inside instead.
                if let Some((ea, eb)) = junction_edge {
                    let mut nrm = unit_or_zero(eb - ea).perp();
                    let interior_left = if on0 {
                        self.g0_interior_left
                    } else {
                        !self.g0_interior_left
                    };
                    if !interior_left {
                        nrm = -nrm;
                    }
                    for mag in [1e-13, 1e-10, 1e-7] {
                        let fp = jpt + nrm * (self.diam * mag);
                        attempt = shortest_path(region, fp, bpt);
                        if attempt.is_ok() {
                            break;
                        }
                    }
                }
            }
            let tail = attempt?;
            for q in &tail.points()[1..] {
                if key(*q) != key(*nodes.last().unwrap()) {
                    nodes.push(*q);
                }
            }
        }
        Ok(RawCurve {
            nodes,
            junction,
            junction_edge,
            on_gamma0: on0,
        })
    }

    /// Node chain at time t with the wake displacement applied; aligned
    /// one to one with the raw nodes.
    fn star_nodes(&self, t: f64) -> Result<Vec<Point2>> {
        if self.constant {
            return Ok(self.gamma0.clone());
        }
        let raw = self.raw_curve(t)?;
        let n = raw.nodes.len();
        let mut out = Vec::with_capacity(n);
        for (idx, p) in raw.nodes.iter().enumerate() {
            if idx == 0 || idx + 1 == n {
                out.push(*p);
                continue;
            }
            let k = key(*p);
            let dir = if idx == raw.junction && raw.junction_edge.is_some() {
                let (ea, eb) = raw.junction_edge.unwrap();
                let mut nrm = unit_or_zero(eb - ea).perp();
                let interior_left = if raw.on_gamma0 {
                    self.g0_interior_left
                } else {
                    !self.g0_interior_left
                };
                if !interior_left {
                    nrm = -nrm;
                }
                nrm
            } else {
                *self.site_dir.get(&k).unwrap_or(&p2(0.0, 0.0))
            };
            // Quadratic in t: a linear factor would make the straight tail
            // of a later curve pass exactly through the junction node of
            // every earlier curve along a shared edge into B.
            let fac = match self.site_on_gamma0.get(&k).copied() {
                Some(true) => t * t,
                Some(false) => (1.0 - t) * (1.0 - t),
                None => {
                    if raw.on_gamma0 {
                        t * t
                    } else {
                        (1.0 - t) * (1.0 - t)
                    }
                }
            };
            out.push(*p + dir * (self.eps * fac));
        }
        Ok(out)
    }

    /// Moving curve at time t as a reparametrized path over s in [0, 1];
    /// with anchors the pinned node sits at s = 1/2 while still present.
    pub fn embedding_at(&self, t: f64) -> Result<ParamPath> {
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfDomain(format!(
                "homotopy time {t} outside [0, 1]"
            )));
        }
        if self.constant {
            return ParamPath::from_parts(vec![(self.gamma0.clone(), 0.0, 1.0)]);
        }
        let on0 = t <= 0.5;
        let p = if on0 { 1.0 - 2.0 * t } else { 2.0 * t - 1.0 };
        let raw = self.raw_curve(t)?;
        let star = self.star_nodes(t)?;
        let j = raw.junction;
        if p <= 0.0 || j == 0 {
            return ParamPath::from_parts(vec![(star, 0.0, 1.0)]);
        }
        let anchor = if on0 { self.anchor0 } else { self.anchor1 };
        let mut parts: Vec<(Vec<Point2>, f64, f64)> = Vec::new();
        match anchor {
            Some(ai) if p > 0.5 && j > ai => {
                parts.push((star[..=ai].to_vec(), 0.0, 0.5));
                parts.push((star[ai..=j].to_vec(), 0.5, p));
            }
            _ => parts.push((star[..=j].to_vec(), 0.0, p)),
        }
        if j + 1 < star.len() {
            parts.push((star[j..].to_vec(), p, 1.0));
        } else if let Some(last) = parts.last_mut() {
            last.2 = 1.0;
        }
        ParamPath::from_parts(parts)
    }

    pub fn eval(&self, t: f64, s: f64) -> Result<Point2> {
        self.embedding_at(t)?.eval(s)
    }

    pub fn curve_at(&self, t: f64) -> Result<PolyLine> {
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfDomain(format!(
                "homotopy time {t} outside [0, 1]"
            )));
        }
        PolyLine::new(dedup_pts(&self.star_nodes(t)?))
    }

    /// Empirical time-Lipschitz constant over an nt by ns sample grid,
    /// normalized by the parametrization speed of the end curves.
    pub fn time_lipschitz_constant(&self, nt: usize, ns: usize) -> Result<f64> {
        if self.constant {
            return Ok(0.0);
        }
        if nt == 0 || ns == 0 {
            return Err(Error::DegenerateInput(
                "lipschitz sampling needs positive grid sizes".into(),
            ));
        }
        let norm = self.lipschitz.max(f64::MIN_POSITIVE);
        let svals: Vec<f64> = (0..=ns).map(|k| k as f64 / ns as f64).collect();
        let mut prev: Vec<Point2> = {
            let path = self.embedding_at(0.0)?;
            svals.iter().map(|s| path.eval(*s)).collect::<Result<_>>()?
        };
        let mut best = 0.0f64;
        for i in 1..=nt {
            let t = i as f64 / nt as f64;
            let path = self.embedding_at(t)?;
            let cur: Vec<Point2> = svals.iter().map(|s| path.eval(*s)).collect::<Result<_>>()?;
            for (p, q) in prev.iter().zip(&cur) {
                best = best.max(p.dist(*q) * nt as f64 / norm);
            }
            prev = cur;
        }
        Ok(best)
    }

    /// Nodes of the middle curve of the family (time 1/2).
    pub fn mid(&self) -> &[Point2] {
        &self.mid
    }

    pub fn region(&self) -> Option<&JordanPolygon> {
        self.region.as_ref()
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    /// Final wake displacement amplitude.
    pub fn spacing(&self) -> f64 {
        self.eps
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

fn end_speed(pts: &[Point2], anchor: Option<usize>) -> f64 {
    let cum = cum_lens(pts);
    let total = *cum.last().unwrap();
    match anchor {
        None => total,
        Some(ai) => (2.0 * cum[ai]).max(2.0 * (total - cum[ai])),
    }
}

/// Curve of the half-fixed family between two arcs at time t.
pub fn half_fixed_homotopy(gamma0: &[Point2], gamma1: &[Point2], t: f64) -> Result<PolyLine> {
    HalfFixedHomotopy::new(gamma0, gamma1)?.curve_at(t)
}

/// A center track opened into two slit walls. Each track vertex P with
/// passage time t_P carries a short transversal segment; once the moving
/// center has passed P, the wall point assigned to P slides outward along
/// that segment in proportion (t - t_P) / (1 - t_P).
#[derive(Debug, Clone)]
pub struct OpenedCurve {
    psi: Vec<Point2>,
    times: Vec<f64>,
    plus_far: Vec<Point2>,
    minus_far: Vec<Point2>,
    pad: f64,
}

impl OpenedCurve {
    pub fn new(
        psi: &[Point2],
        times: &[f64],
        obstacles: &[&[Point2]],
        cap: f64,
    ) -> Result<OpenedCurve> {
        let psi = dedup_pts(psi);
        if psi.len() < 2 {
            return Err(Error::DegenerateInput(
                "an opened track needs at least two points".into(),
            ));
        }
        if times.len() != psi.len() {
            return Err(Error::DegenerateInput(
                "opened track times must match the track nodes".into(),
            ));
        }
        if times[0] != 0.0 || *times.last().unwrap() != 1.0 {
            return Err(Error::DegenerateInput(
                "opened track times must start at 0 and end at 1".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::DegenerateInput(
                "opened track times must increase strictly".into(),
            ));
        }
        if !(cap > 0.0) || !cap.is_finite() {
            return Err(Error::DegenerateInput(
                "opened track cap must be positive and finite".into(),
            ));
        }
        if !chain_simple(&psi) {
            return Err(Error::NonSimple("opened track must be simple".into()));
        }
        let n = psi.len();
        let tol = chain_len(&psi).max(cap) * 1e-12;
        let mut dirs = Vec::with_capacity(n);
        for i in 0..n {
            let d = if i == 0 {
                unit_or_zero(psi[1] - psi[0]).perp()
            } else if i + 1 == n {
                unit_or_zero(psi[n - 1] - psi[n - 2]).perp()
            } else {
                let left = unit_or_zero(unit_or_zero(psi[i + 1] - psi[i - 1]).perp());
                let u = unit_or_zero(psi[i - 1] - psi[i]);
                let w = unit_or_zero(psi[i + 1] - psi[i]);
                let s = u + w;
                if s.norm() < 1e-9 {
                    left
                } else {
                    let b = unit_or_zero(s);
                    if b.dot(left) >= 0.0 {
                        b
                    } else {
                        -b
                    }
                }
            };
            dirs.push(d);
        }
        let mut lens = Vec::with_capacity(n);
        for i in 0..n {
            let mut clearance = f64::INFINITY;
            for chain in obstacles {
                for w in chain.windows(2) {
                    if key(w[0]) == key(w[1]) {
                        continue;
                    }
                    let d = point_segment_distance(w[0], w[1], psi[i]);
                    if d > tol {
                        clearance = clearance.min(d);
                    }
                }
            }
            for (j, w) in psi.windows(2).enumerate() {
                if j == i || j + 1 == i {
                    continue;
                }
                let d = point_segment_distance(w[0], w[1], psi[i]);
                if d > tol {
                    clearance = clearance.min(d);
                }
            }
            lens.push(clearance.min(cap) / 8.0);
        }
        let mut out = OpenedCurve {
            psi: psi.clone(),
            times: times.to_vec(),
            plus_far: Vec::new(),
            minus_far: Vec::new(),
            pad: 0.0,
        };
        for attempt in 0..=40 {
            let shrink = 2f64.powi(-attempt);
            out.plus_far = (0..n).map(|i| psi[i] + dirs[i] * (lens[i] * shrink)).collect();
            out.minus_far = (0..n).map(|i| psi[i] - dirs[i] * (lens[i] * shrink)).collect();
            if out.sides_ok(obstacles)? {
                out.pad = lens
                    .iter()
                    .map(|l| l * shrink)
                    .fold(0.0f64, |a, b| a.max(b));
                return Ok(out);
            }
        }
        Err(Error::ConstructionFailed(
            "could not fit the slit walls around the center track".into(),
        ))
    }

    fn sides_ok(&self, obstacles: &[&[Point2]]) -> Result<bool> {
        let n = self.psi.len();
        let side = |i: usize, plus: bool| -> (Point2, Point2) {
            (
                self.psi[i],
                if plus {
                    self.plus_far[i]
                } else {
                    self.minus_far[i]
                },
            )
        };
        for i in 0..n {
            for plus in [true, false] {
                let (p, far) = side(i, plus);
                if key(p) == key(far) {
                    return Ok(false);
                }
                let seg = [p, far];
                if chains_meet(&seg, &self.psi, &[p])?.is_some() {
                    return Ok(false);
                }
                for chain in obstacles {
                    if chains_meet(&seg, chain, &[p])?.is_some() {
                        return Ok(false);
                    }
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                for pi in [true, false] {
                    for pj in [true, false] {
                        let (a, fa) = side(i, pi);
                        let (b, fb) = side(j, pj);
                        match segments_intersect(a, fa, b, fb)? {
                            SegmentMeet::Disjoint => {}
                            _ => return Ok(false),
                        }
                    }
                }
            }
        }
        Ok(true)
    }

    /// Wall point for track vertex i at time t.
    pub fn split_point(&self, i: usize, t: f64, plus: bool) -> Point2 {
        let ti = self.times[i];
        let r = if ti >= 1.0 {
            0.0
        } else {
            ((t - ti) / (1.0 - ti)).clamp(0.0, 1.0)
        };
        let far = if plus {
            self.plus_far[i]
        } else {
            self.minus_far[i]
        };
        self.psi[i].lerp(far, r)
    }

    /// Point of the center track at time t.
    pub fn eval(&self, t: f64) -> Point2 {
        let t = t.clamp(0.0, 1.0);
        let mut i = 0;
        while i + 2 < self.times.len() && self.times[i + 1] <= t {
            i += 1;
        }
        let span = self.times[i + 1] - self.times[i];
        if span <= 0.0 {
            return self.psi[i];
        }
        let f = ((t - self.times[i]) / span).clamp(0.0, 1.0);
        self.psi[i].lerp(self.psi[i + 1], f)
    }

    /// Wall strand at time t ending at the given head point.
    pub fn strand_with_head(&self, t: f64, plus: bool, head: Point2) -> Vec<Point2> {
        let mut out: Vec<Point2> = Vec::new();
        for i in 0..self.psi.len() - 1 {
            if self.times[i] <= t {
                let q = self.split_point(i, t, plus);
                if out.last().map(|p| key(*p)) != Some(key(q)) {
                    out.push(q);
                }
            }
        }
        if out.last().map(|p| key(*p)) != Some(key(head)) {
            out.push(head);
        }
        out
    }

    pub fn plus_at(&self, t: f64) -> Vec<Point2> {
        self.strand_with_head(t, true, self.eval(t))
    }

    pub fn minus_at(&self, t: f64) -> Vec<Point2> {
        self.strand_with_head(t, false, self.eval(t))
    }

    /// Largest wall segment length.
    pub fn pad(&self) -> f64 {
        self.pad
    }

    pub fn psi(&self) -> &[Point2] {
        &self.psi
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Four simple arms meeting at a common center and nowhere else. Arms are
/// stored from their free end to the center.
#[derive(Debug, Clone)]
pub struct Cross {
    arms: [Vec<Point2>; 4],
}

impl Cross {
    pub fn new(arms: [Vec<Point2>; 4]) -> Result<Cross> {
        let arms = arms.map(|a| dedup_pts(&a));
        for arm in &arms {
            if arm.len() < 2 {
                return Err(Error::DegenerateInput(
                    "each cross arm needs at least two distinct points".into(),
                ));
            }
            if !chain_simple(arm) {
                return Err(Error::NonSimple("cross arms must be simple".into()));
            }
        }
        let center = *arms[0].last().unwrap();
        if arms.iter().any(|a| key(*a.last().unwrap()) != key(center)) {
            return Err(Error::DegenerateInput(
                "cross arms must end at a common center".into(),
            ));
        }
        for i in 0..4 {
            if key(arms[i][0]) == key(center) {
                return Err(Error::DegenerateInput(
                    "cross arm ends must differ from the center".into(),
                ));
            }
            for j in i + 1..4 {
                if key(arms[i][0]) == key(arms[j][0]) {
                    return Err(Error::DegenerateInput(
                        "cross arm ends must be pairwise distinct".into(),
                    ));
                }
            }
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if let Some(w) = chains_meet(&arms[i], &arms[j], &[center])? {
                    return Err(Error::NonSimple(format!(
                        "cross arms meet away from the center near ({:.6}, {:.6})",
                        w.x, w.y
                    )));
                }
            }
        }
        Ok(Cross { arms })
    }

    pub fn arms(&self) -> &[Vec<Point2>; 4] {
        &self.arms
    }

    pub fn arm(&self, i: usize) -> &[Point2] {
        &self.arms[i]
    }

    pub fn center(&self) -> Point2 {
        *self.arms[0].last().unwrap()
    }

    pub fn ends(&self) -> [Point2; 4] {
        [
            self.arms[0][0],
            self.arms[1][0],
            self.arms[2][0],
            self.arms[3][0],
        ]
    }

    pub fn nodes(&self) -> Vec<Point2> {
        let mut out = Vec::new();
        for arm in &self.arms {
            out.extend_from_slice(arm);
        }
        out
    }
}

/// Deformation of a cross that migrates its center to a target point. Arms
/// 0 and 1 must form the through pair: their union is rerouted through the
/// target by a half-fixed family inside corridor `k1`. Arms 2 and 3 live in
/// corridor `k2`; behind the moving center they extend along the slit walls
/// of the opened center track.
#[derive(Debug, Clone)]
pub struct CrossDeform {
    cross0: Cross,
    target: Point2,
    constant: bool,
    hf: Option<HalfFixedHomotopy>,
    opened: Option<OpenedCurve>,
    plus_arm: usize,
    tube_pad: f64,
    alpha_ratio: f64,
    k1: JordanPolygon,
    k2: JordanPolygon,
}

impl CrossDeform {
    pub fn new(
        cross0: &Cross,
        target: Point2,
        k1: &JordanPolygon,
        k2: &JordanPolygon,
    ) -> Result<CrossDeform> {
        if !target.is_finite() {
            return Err(Error::DegenerateInput("target center must be finite".into()));
        }
        let mut out = CrossDeform {
            cross0: cross0.clone(),
            target,
            constant: false,
            hf: None,
            opened: None,
            plus_arm: 2,
            tube_pad: 0.0,
            alpha_ratio: 1.0,
            k1: k1.clone(),
            k2: k2.clone(),
        };
        let center = cross0.center();
        if key(target) == key(center) {
            out.constant = true;
            return Ok(out);
        }
        if k1.locate(target) == PointLocation::Outside {
            return Err(Error::DegenerateInput(
                "the target center must lie in the through corridor".into(),
            ));
        }
        for i in [0usize, 1] {
            if !chain_in_region(cross0.arm(i), k1) {
                return Err(Error::DegenerateInput(
                    "the through arms must lie in the through corridor".into(),
                ));
            }
        }
        for i in [2usize, 3] {
            if !chain_in_region(cross0.arm(i), k2) {
                return Err(Error::DegenerateInput(
                    "the crossing arms must lie in the crossing corridor".into(),
                ));
            }
        }
        let m1 = cross0.arm(0)[0];
        let m2 = cross0.arm(1)[0];
        let mut psi0 = cross0.arm(0).to_vec();
        psi0.extend(cross0.arm(1).iter().rev().skip(1));
        let anchor0 = cross0.arm(0).len() - 1;
        let mut all = cross0.nodes();
        all.push(target);
        all.extend_from_slice(k1.verts());
        let scale = points_diameter(&all).max(f64::MIN_POSITIVE);
        let k1_loop = closed_chain(k1.verts());
        let k2_loop = closed_chain(k2.verts());
        let allowed_k1 = [m1, m2, target];
        let alpha1 = route_avoiding(
            m1,
            target,
            &[
                (&k1_loop, &allowed_k1),
                (&psi0, &[m1][..]),
                (cross0.arm(2), &[]),
                (cross0.arm(3), &[]),
            ],
            target,
            scale,
            scale,
        )?;
        let alpha2 = route_avoiding(
            m2,
            target,
            &[
                (&k1_loop, &allowed_k1),
                (&psi0, &[m2][..]),
                (cross0.arm(2), &[]),
                (cross0.arm(3), &[]),
                (&alpha1, &[target][..]),
            ],
            target,
            scale,
            scale,
        )?;
        let r1 = chain_len(&alpha1) / m1.dist(target).max(f64::MIN_POSITIVE);
        let r2 = chain_len(&alpha2) / m2.dist(target).max(f64::MIN_POSITIVE);
        out.alpha_ratio = r1.max(r2);
        let mut psi1 = alpha1.clone();
        psi1.extend(alpha2.iter().rev().skip(1));
        let anchor1 = alpha1.len() - 1;
        if !chain_simple(&psi1) {
            return Err(Error::ConstructionFailed(
                "the relocated through path self-intersects".into(),
            ));
        }
        let hf = HalfFixedHomotopy::with_anchors(&psi0, &psi1, anchor0, anchor1)?;
        let mut track: Vec<Point2> = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        for k in 0..=64 {
            let t = k as f64 / 64.0;
            let q = hf.eval(t, 0.5)?;
            if track.last().map(|p| key(*p)) != Some(key(q)) {
                track.push(q);
                times.push(t);
            } else if let Some(last) = times.last_mut() {
                *last = t;
            }
        }
        if track.len() < 2 {
            return Err(Error::ConstructionFailed(
                "the center track degenerated to a point".into(),
            ));
        }
        *times.last_mut().unwrap() = 1.0;
        if !chain_simple(&track) {
            return Err(Error::ConstructionFailed(
                "the center track self-intersects".into(),
            ));
        }
        let d = track[1] - track[0];
        let mut side = [0.0f64; 2];
        for (slot, arm_idx) in [2usize, 3].iter().enumerate() {
            let arm = cross0.arm(*arm_idx);
            for q in arm.iter().rev().skip(1) {
                let s = d.cross(*q - center);
                if s != 0.0 {
                    side[slot] = s;
                    break;
                }
            }
        }
        if side[0] == 0.0 || side[1] == 0.0 || side[0].signum() == side[1].signum() {
            return Err(Error::ConstructionFailed(
                "the crossing arms must approach the moving center from opposite sides".into(),
            ));
        }
        out.plus_arm = if side[0] > 0.0 { 2 } else { 3 };
        let obstacles: Vec<&[Point2]> = vec![
            &psi0,
            &psi1,
            cross0.arm(2),
            cross0.arm(3),
            &k1_loop,
            &k2_loop,
        ];
        out.hf = Some(hf);
        // The slit walls only respect the static obstacles by construction;
        // intermediate crosses are validated by sampling and the walls are
        // shortened until every sample is a valid cross.
        let mut last_err = None;
        for k in 0..=12 {
            let cap = scale / 16.0 * 2f64.powi(-k);
            let opened = OpenedCurve::new(&track, &times, &obstacles, cap)?;
            out.tube_pad = opened.pad();
            out.opened = Some(opened);
            let mut ok = true;
            for i in 0..=16 {
                if let Err(e) = out.at(i as f64 / 16.0) {
                    last_err = Some(e);
                    ok = false;
                    break;
                }
            }
            if ok {
                return Ok(out);
            }
        }
        Err(last_err.unwrap_or_else(|| {
            Error::ConstructionFailed("could not fit the slit walls".into())
        }))
    }

    pub fn at(&self, t: f64) -> Result<Cross> {
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfDomain(format!(
                "cross deformation time {t} outside [0, 1]"
            )));
        }
        if self.constant {
            return Ok(self.cross0.clone());
        }
        let hf = self.hf.as_ref().unwrap();
        let opened = self.opened.as_ref().unwrap();
        let path = hf.embedding_at(t)?;
        let (left, right) = path.split_at(0.5);
        let c = *left.last().unwrap();
        let arm0 = left;
        let mut arm1 = right;
        arm1.reverse();
        let plus_idx = self.plus_arm;
        let minus_idx = 5 - plus_idx;
        let mut arms: [Vec<Point2>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        arms[0] = arm0;
        arms[1] = arm1;
        for (idx, plus) in [(plus_idx, true), (minus_idx, false)] {
            let base = self.cross0.arm(idx);
            let mut arm = base[..base.len() - 1].to_vec();
            for q in opened.strand_with_head(t, plus, c) {
                if arm.last().map(|p| key(*p)) != Some(key(q)) {
                    arm.push(q);
                }
            }
            arms[idx] = arm;
        }
        let cross = Cross::new(arms)?;
        let track = opened.psi();
        let chain_dist = |chain: &[Point2], p: Point2| -> f64 {
            let mut d = f64::INFINITY;
            for w in chain.windows(2) {
                if key(w[0]) == key(w[1]) {
                    continue;
                }
                d = d.min(point_segment_distance(w[0], w[1], p));
            }
            d
        };
        let slack = self.tube_pad * 1.0000001 + 1e-12;
        for arm in cross.arms() {
            let mut probes: Vec<Point2> = arm.clone();
            for w in arm.windows(2) {
                probes.push(w[0].lerp(w[1], 0.5));
            }
            for p in probes {
                if self.k1.locate(p) != PointLocation::Outside
                    || self.k2.locate(p) != PointLocation::Outside
                {
                    continue;
                }
                let mut d = chain_dist(track, p);
                for base in self.cross0.arms() {
                    d = d.min(chain_dist(base, p));
                }
                if d > slack {
                    return Err(Error::ConstructionFailed(format!(
                        "a cross arm leaves the working corridors near ({:.6}, {:.6})",
                        p.x, p.y
                    )));
                }
            }
        }
        Ok(cross)
    }

    /// Opened center track, when the deformation is not constant.
    pub fn track(&self) -> Option<&OpenedCurve> {
        self.opened.as_ref()
    }

    pub fn target(&self) -> Point2 {
        self.target
    }

    /// Length overhead of the rerouted through path relative to straight
    /// chords from the fixed arm ends to the target.
    pub fn alpha_length_ratio(&self) -> f64 {
        self.alpha_ratio
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }
}

fn chain_in_region(chain: &[Point2], region: &JordanPolygon) -> bool {
    for p in chain {
        if region.locate(*p) == PointLocation::Outside {
            return false;
        }
    }
    for w in chain.windows(2) {
        if region.locate(w[0].lerp(w[1], 0.5)) == PointLocation::Outside {
            return false;
        }
    }
    true
}

/// Cross at time t of the deformation migrating the center to `target`.
pub fn cross_deform(
    cross0: &Cross,
    target: Point2,
    k1: &JordanPolygon,
    k2: &JordanPolygon,
    t: f64,
) -> Result<Cross> {
    CrossDeform::new(cross0, target, k1, k2)?.at(t)
}

/// Simple counterclockwise loop with four marked corner nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedLoop {
    points: Vec<Point2>,
    corners: [usize; 4],
}

impl MarkedLoop {
    pub fn new(points: Vec<Point2>, corners: [usize; 4]) -> Result<MarkedLoop> {
        if points.len() < 4 {
            return Err(Error::DegenerateInput(
                "a marked loop needs at least four points".into(),
            ));
        }
        for w in points.windows(2) {
            if key(w[0]) == key(w[1]) {
                return Err(Error::DegenerateInput(
                    "a marked loop must not repeat consecutive points".into(),
                ));
            }
        }
        if key(points[0]) == key(*points.last().unwrap()) {
            return Err(Error::DegenerateInput(
                "a marked loop is stored open, without the closing point".into(),
            ));
        }
        if corners.windows(2).any(|w| w[1] <= w[0]) || corners[3] >= points.len() {
            return Err(Error::DegenerateInput(
                "marked corners must be strictly increasing node indices".into(),
            ));
        }
        JordanPolygon::new(points.clone())
            .map_err(|e| Error::NonSimple(format!("marked loop is not simple: {e}")))?;
        if !(shoelace(&points) > 0.0) {
            return Err(Error::DegenerateInput(
                "a marked loop must run counterclockwise".into(),
            ));
        }
        Ok(MarkedLoop { points, corners })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn corners(&self) -> [usize; 4] {
        self.corners
    }

    pub fn corner_point(&self, j: usize) -> Point2 {
        self.points[self.corners[j % 4]]
    }

    /// Side j: the node run from corner j to corner j + 1, inclusive.
    pub fn side(&self, j: usize) -> Vec<Point2> {
        let n = self.points.len();
        let start = self.corners[j % 4];
        let end = self.corners[(j + 1) % 4];
        let mut out = vec![self.points[start]];
        let mut idx = start;
        loop {
            idx = (idx + 1) % n;
            out.push(self.points[idx]);
            if idx == end {
                break;
            }
        }
        out
    }
}

/// Splits a side chain at its arclength midpoint, returning the chain with
/// the midpoint guaranteed to be a node, plus that node's index.
fn insert_mid(side: &[Point2]) -> Result<(Vec<Point2>, usize)> {
    if side.len() < 2 {
        return Err(Error::DegenerateInput(
            "cannot halve a side with fewer than two points".into(),
        ));
    }
    let cum = cum_lens(side);
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(Error::DegenerateInput("cannot halve a zero-length side".into()));
    }
    let half = total / 2.0;
    let mut i = 0;
    while i + 2 < cum.len() && cum[i + 1] < half {
        i += 1;
    }
    let seg = cum[i + 1] - cum[i];
    let frac = if seg > 0.0 {
        ((half - cum[i]) / seg).clamp(0.0, 1.0)
    } else {
        0.0
    };
    if frac <= 0.0 {
        return Ok((side.to_vec(), i));
    }
    if frac >= 1.0 {
        return Ok((side.to_vec(), i + 1));
    }
    let q = side[i].lerp(side[i + 1], frac);
    if key(q) == key(side[i]) {
        Ok((side.to_vec(), i))
    } else if key(q) == key(side[i + 1]) {
        Ok((side.to_vec(), i + 1))
    } else {
        let mut out = side[..=i].to_vec();
        out.push(q);
        out.extend_from_slice(&side[i + 1..]);
        Ok((out, i + 1))
    }
}

/// Homotopy carrying a marked loop onto another marked loop, built from
/// eight half-fixed stages. Stages 0..3 (time up to 1/2) reroute each
/// corner wedge, between the midpoints of its two sides, through the
/// matching corner of the target loop; stages 4..7 then deform each
/// rerouted side onto the matching target side. The two loops may cross
/// each other near corners; each constructed stage is validated on its own.
#[derive(Debug, Clone)]
pub struct GridLevelHomotopy {
    constant: bool,
    base: Vec<Point2>,
    wedges: Vec<Vec<Point2>>,
    psi1s: Vec<Vec<Point2>>,
    corner_hf: Vec<HalfFixedHomotopy>,
    tilde_sides: Vec<Vec<Point2>>,
    hat_sides: Vec<Vec<Point2>>,
    side_hf: Vec<HalfFixedHomotopy>,
    tilde: MarkedLoop,
}

impl GridLevelHomotopy {
    pub fn new(gamma: &MarkedLoop, hat: &MarkedLoop) -> Result<GridLevelHomotopy> {
        if gamma == hat {
            return Ok(GridLevelHomotopy {
                constant: true,
                base: gamma.points().to_vec(),
                wedges: Vec::new(),
                psi1s: Vec::new(),
                corner_hf: Vec::new(),
                tilde_sides: Vec::new(),
                hat_sides: Vec::new(),
                side_hf: Vec::new(),
                tilde: gamma.clone(),
            });
        }
        let mut first_half: Vec<Vec<Point2>> = Vec::with_capacity(4);
        let mut second_half: Vec<Vec<Point2>> = Vec::with_capacity(4);
        for j in 0..4 {
            let side = gamma.side(j);
            let (with_mid, mi) = insert_mid(&side)?;
            first_half.push(with_mid[..=mi].to_vec());
            second_half.push(with_mid[mi..].to_vec());
        }
        let mut wedges: Vec<Vec<Point2>> = Vec::with_capacity(4);
        for j in 0..4 {
            let mut w = second_half[(j + 3) % 4].clone();
            w.extend_from_slice(&first_half[j][1..]);
            wedges.push(w);
        }
        let base = assemble_loop(&wedges);
        let hat_loop = closed_chain(hat.points());
        let mut chains: Vec<Vec<Point2>> = wedges.clone();
        let mut psi1s: Vec<Vec<Point2>> = Vec::with_capacity(4);
        let mut vhat_idx: Vec<usize> = Vec::with_capacity(4);
        let mut corner_hf: Vec<HalfFixedHomotopy> = Vec::with_capacity(4);
        for j in 0..4 {
            let vj = gamma.corner_point(j);
            let vh = hat.corner_point(j);
            let m_in = wedges[j][0];
            let m_out = *wedges[j].last().unwrap();
            if key(vh) == key(m_in) || key(vh) == key(m_out) {
                return Err(Error::DegenerateInput(
                    "a target corner coincides with a side midpoint".into(),
                ));
            }
            let loop_now = closed_chain(&assemble_loop(&chains));
            let radius = vj
                .dist(m_in)
                .max(vj.dist(m_out))
                .max(vj.dist(vh))
                .max(f64::MIN_POSITIVE)
                * 3.0;
            let loop_allowed = [m_in, m_out];
            let hat_allowed = [vh];
            let psi1 = if key(vj) == key(vh) {
                wedges[j].clone()
            } else {
                let r1 = route_avoiding(
                    m_in,
                    vh,
                    &[(&loop_now, &loop_allowed), (&hat_loop, &hat_allowed)],
                    vj,
                    radius,
                    radius,
                )?;
                let r2 = route_avoiding(
                    m_out,
                    vh,
                    &[
                        (&loop_now, &loop_allowed),
                        (&hat_loop, &hat_allowed),
                        (&r1, &hat_allowed),
                    ],
                    vj,
                    radius,
                    radius,
                )?;
                let mut p = r1.clone();
                p.extend(r2.iter().rev().skip(1));
                p
            };
            let vi = psi1
                .iter()
                .position(|p| key(*p) == key(vh))
                .or_else(|| psi1.iter().position(|p| key(*p) == key(vj)))
                .ok_or_else(|| {
                    Error::InvariantViolated("rerouted wedge lost its corner node".into())
                })?;
            let hf = HalfFixedHomotopy::new(&wedges[j], &psi1)?;
            chains[j] = psi1.clone();
            psi1s.push(psi1);
            vhat_idx.push(vi);
            corner_hf.push(hf);
        }
        let mut tilde_sides: Vec<Vec<Point2>> = Vec::with_capacity(4);
        for j in 0..4 {
            let mut side = psi1s[j][vhat_idx[j]..].to_vec();
            let nxt = (j + 1) % 4;
            side.extend_from_slice(&psi1s[nxt][1..=vhat_idx[nxt]]);
            tilde_sides.push(dedup_pts(&side));
        }
        let mut tilde_pts: Vec<Point2> = Vec::new();
        let mut tilde_corners = [0usize; 4];
        for j in 0..4 {
            tilde_corners[j] = tilde_pts.len();
            tilde_pts.extend_from_slice(&tilde_sides[j][..tilde_sides[j].len() - 1]);
        }
        let tilde = MarkedLoop::new(tilde_pts, tilde_corners)?;
        let mut hat_sides: Vec<Vec<Point2>> = Vec::with_capacity(4);
        let mut side_hf: Vec<HalfFixedHomotopy> = Vec::with_capacity(4);
        for j in 0..4 {
            let hs = hat.side(j);
            let hf = HalfFixedHomotopy::new(&tilde_sides[j], &hs)?;
            hat_sides.push(hs);
            side_hf.push(hf);
        }
        let out = GridLevelHomotopy {
            constant: false,
            base,
            wedges,
            psi1s,
            corner_hf,
            tilde_sides,
            hat_sides,
            side_hf,
            tilde,
        };
        // Each stage is validated on its own lens, but the moving piece must
        // also stay clear of the static remainder of the loop.
        for k in 0..=32 {
            let t = k as f64 / 32.0;
            let pts = out.at(t)?;
            if JordanPolygon::new(pts).is_err() {
                return Err(Error::ConstructionFailed(format!(
                    "the moving loop self-intersects at time {t:.4}"
                )));
            }
        }
        Ok(out)
    }

    /// Loop at time t, stored open (first node not repeated).
    pub fn at(&self, t: f64) -> Result<Vec<Point2>> {
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfDomain(format!(
                "grid level homotopy time {t} outside [0, 1]"
            )));
        }
        if self.constant {
            return Ok(self.base.clone());
        }
        let mut parts: Vec<Vec<Point2>> = Vec::with_capacity(4);
        if t <= 0.5 {
            let s = t * 8.0;
            let stage = (s.floor() as usize).min(3);
            let local = (s - stage as f64).clamp(0.0, 1.0);
            for j in 0..4 {
                if j < stage {
                    parts.push(self.psi1s[j].clone());
                } else if j == stage {
                    parts.push(self.corner_hf[j].curve_at(local)?.points().to_vec());
                } else {
                    parts.push(self.wedges[j].clone());
                }
            }
        } else {
            let s = (t - 0.5) * 8.0;
            let stage = (s.floor() as usize).min(3);
            let local = (s - stage as f64).clamp(0.0, 1.0);
            for j in 0..4 {
                if j < stage {
                    parts.push(self.hat_sides[j].clone());
                } else if j == stage {
                    parts.push(self.side_hf[j].curve_at(local)?.points().to_vec());
                } else {
                    parts.push(self.tilde_sides[j].clone());
                }
            }
        }
        Ok(assemble_loop(&parts))
    }

    /// Intermediate loop reached after the four corner stages, with its
    /// corners at the target corner points.
    pub fn tilde(&self) -> &MarkedLoop {
        &self.tilde
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }
}

fn assemble_loop(parts: &[Vec<Point2>]) -> Vec<Point2> {
    let mut out: Vec<Point2> = Vec::new();
    for part in parts {
        for &p in part {
            if out.last().map(|q| key(*q)) != Some(key(p)) {
                out.push(p);
            }
        }
    }
    while out.len() > 1 && key(out[0]) == key(*out.last().unwrap()) {
        out.pop();
    }
    out
}

/// Loop of the homotopy carrying `gamma` onto `hat` at time t.
pub fn grid_level_homotopy(gamma: &MarkedLoop, hat: &MarkedLoop, t: f64) -> Result<Vec<Point2>> {
    GridLevelHomotopy::new(gamma, hat)?.at(t)
}

/// Pushes interior cross nodes to clearance at least `clearance` from the
/// region boundary, keeping the four free ends fixed. Retries with halved
/// clearance until the nudged cross stays valid and strictly interior.
pub fn nudge_cross_inward(
    cross: &Cross,
    region: &JordanPolygon,
    clearance: f64,
) -> Result<Cross> {
    if !(clearance > 0.0) || !clearance.is_finite() {
        return Err(Error::DegenerateInput(
            "nudge clearance must be positive and finite".into(),
        ));
    }
    for arm in cross.arms() {
        for p in arm {
            if region.locate(*p) == PointLocation::Outside {
                return Err(Error::DegenerateInput(
                    "the cross must start inside the region".into(),
                ));
            }
        }
    }
    let verts = region.verts();
    let nudged = |p: Point2, c: f64| -> Point2 {
        let (d, near, edge) = nearest_on_loop(verts, p);
        if d >= c {
            return p;
        }
        let dir = if d > 0.0 {
            unit_or_zero(p - near)
        } else {
            let a = verts[edge];
            let b = verts[(edge + 1) % verts.len()];
            unit_or_zero(b - a).perp()
        };
        p + dir * (c - d)
    };
    let mut c = clearance;
    for _ in 0..=40 {
        let center = nudged(cross.center(), c);
        let mut arms: [Vec<Point2>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for (i, arm) in cross.arms().iter().enumerate() {
            let mut out = vec![arm[0]];
            for p in &arm[1..arm.len() - 1] {
                out.push(nudged(*p, c));
            }
            out.push(center);
            arms[i] = out;
        }
        if let Ok(cand) = Cross::new(arms) {
            let mut ok = true;
            'check: for arm in cand.arms() {
                for p in &arm[1..] {
                    if region.locate(*p) != PointLocation::Inside {
                        ok = false;
                        break 'check;
                    }
                    if !(nearest_on_loop(verts, *p).0 > 0.0) {
                        ok = false;
                        break 'check;
                    }
                }
                for w in arm.windows(2) {
                    if region.locate(w[0].lerp(w[1], 0.5)) == PointLocation::Outside {
                        ok = false;
                        break 'check;
                    }
                }
            }
            if ok {
                return Ok(cand);
            }
        }
        c /= 2.0;
    }
    Err(Error::ConstructionFailed(
        "could not push the cross interior off the region boundary".into(),
    ))
}

/// Number of transversal crossings of each arm of `of` with the whole of
/// `against`. Contacts at shared free ends are allowed; any other touching
/// or overlap is an error.
pub fn cross_intersection_counts(of: &Cross, against: &Cross) -> Result<[usize; 4]> {
    let ends_of = of.ends();
    let ends_against = against.ends();
    let allowed: Vec<Point2> = ends_of
        .iter()
        .filter(|p| ends_against.iter().any(|q| key(*q) == key(**p)))
        .copied()
        .collect();
    let mut counts = [0usize; 4];
    for (i, arm) in of.arms().iter().enumerate() {
        for w in arm.windows(2) {
            if key(w[0]) == key(w[1]) {
                continue;
            }
            for other in against.arms() {
                for v in other.windows(2) {
                    if key(v[0]) == key(v[1]) {
                        continue;
                    }
                    match segments_intersect(w[0], w[1], v[0], v[1])? {
                        SegmentMeet::Disjoint => {}
                        SegmentMeet::InteriorCross => counts[i] += 1,
                        SegmentMeet::Overlap => {
                            return Err(Error::InvariantViolated(
                                "the crosses overlap along a segment".into(),
                            ));
                        }
                        SegmentMeet::EndpointTouch => {
                            for p in touch_points(w[0], w[1], v[0], v[1]) {
                                if !allowed.iter().any(|q| key(*q) == key(p)) {
                                    return Err(Error::InvariantViolated(format!(
                                        "the crosses touch tangentially near ({:.6}, {:.6})",
                                        p.x, p.y
                                    )));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(counts)
}

/// Builds a separating cross between two stacked crosses that share their
/// four boundary endpoints. The result reuses those endpoints, runs its
/// arms in thin nested rings around one region corner, and crosses each of
/// the stacked crosses transversally in exactly two points, once on each
/// of its last two arms.
pub fn build_t_fix(t_mid: &Cross, t_bot: &Cross, region: &JordanPolygon) -> Result<Cross> {
    let ends = t_mid.ends();
    for p in &ends {
        if region.locate(*p) != PointLocation::Boundary {
            return Err(Error::DegenerateInput(
                "cross endpoints must lie on the region boundary".into(),
            ));
        }
    }
    let bot_ends = t_bot.ends();
    for p in &ends {
        if !bot_ends.iter().any(|q| key(*q) == key(*p)) {
            return Err(Error::DegenerateInput(
                "the stacked crosses must share their four endpoints".into(),
            ));
        }
    }
    let verts = region.verts().to_vec();
    let n = verts.len();
    let mut cum = vec![0.0f64];
    for i in 0..n {
        let next = verts[(i + 1) % n];
        cum.push(cum[i] + verts[i].dist(next));
    }
    let perim = cum[n];
    if !(perim > 0.0) {
        return Err(Error::DegenerateInput("region has no boundary length".into()));
    }
    let pos_of = |p: Point2| -> Option<f64> {
        for i in 0..n {
            let a = verts[i];
            let b = verts[(i + 1) % n];
            if on_segment(a, b, p) {
                return Some(cum[i] + a.dist(p));
            }
        }
        None
    };
    let mut end_pos = Vec::with_capacity(4);
    for p in &ends {
        match pos_of(*p) {
            Some(s) => end_pos.push(s),
            None => {
                return Err(Error::DegenerateInput(
                    "a cross endpoint does not sit on a boundary edge".into(),
                ));
            }
        }
    }
    let d0 = 0.02 * points_diameter(&verts).max(f64::MIN_POSITIVE);
    let t1 = nudge_cross_inward(t_mid, region, d0)?;
    let mut min_u = f64::INFINITY;
    for ci in 0..n {
        let cpos = cum[ci];
        let mut rel: Vec<(f64, usize)> = end_pos
            .iter()
            .enumerate()
            .map(|(k, s)| ((s - cpos).rem_euclid(perim), k))
            .collect();
        rel.sort_by(|a, b| a.0.total_cmp(&b.0));
        if !(rel[0].0 > 0.0) {
            continue;
        }
        // Walk order from the corner: nearest endpoint counterclockwise
        // gets the shallowest ring, nearest clockwise the next one, and the
        // two far endpoints the deep rings that must cross the stack.
        let plan = [
            (rel[0].1, 1.0, true),
            (rel[3].1, 2.0, false),
            (rel[1].1, 3.0, true),
            (rel[2].1, 4.0, false),
        ];
        for h in 0..12 {
            let u = d0 / 5.0 * 2f64.powi(-h);
            min_u = min_u.min(u);
            let center = verts[ci] + inward_bisector(&verts, ci) * (5.0 * u);
            if region.locate(center) != PointLocation::Inside {
                continue;
            }
            let mut arms: Vec<Vec<Point2>> = Vec::with_capacity(4);
            let mut failed = false;
            for (which, mult, ccw) in plan {
                let e = ends[which];
                let erel = if ccw {
                    (end_pos[which] - cpos).rem_euclid(perim)
                } else {
                    (cpos - end_pos[which]).rem_euclid(perim)
                };
                match ring_arm(&verts, &cum, perim, cpos, e, erel, mult * u, ccw, center, region)
                {
                    Some(a) => arms.push(a),
                    None => {
                        failed = true;
                        break;
                    }
                }
            }
            if failed {
                continue;
            }
            let cand = match Cross::new([
                arms[0].clone(),
                arms[1].clone(),
                arms[2].clone(),
                arms[3].clone(),
            ]) {
                Ok(c) => c,
                Err(_) => continue,
            };
            let mut contained = true;
            'cont: for arm in cand.arms() {
                if region.locate(arm[0]) != PointLocation::Boundary {
                    contained = false;
                    break;
                }
                for p in &arm[1..] {
                    if region.locate(*p) != PointLocation::Inside {
                        contained = false;
                        break 'cont;
                    }
                }
                for w in arm.windows(2) {
                    if region.locate(w[0].lerp(w[1], 0.5)) == PointLocation::Outside {
                        contained = false;
                        break 'cont;
                    }
                }
            }
            if !contained {
                continue;
            }
            let c_mid = match cross_intersection_counts(&cand, &t1) {
                Ok(c) => c,
                Err(_) => continue,
            };
            let c_bot = match cross_intersection_counts(&cand, t_bot) {
                Ok(c) => c,
                Err(_) => continue,
            };
            if c_mid == [0, 0, 1, 1] && c_bot == [0, 0, 1, 1] {
                return Ok(cand);
            }
        }
    }
    Err(Error::ConstructionFailed(format!(
        "could not route a separating cross between the stacked crosses; smallest clearance tried {:.3e}",
        min_u
    )))
}

/// One ring arm from endpoint `e` around the boundary walk back to the
/// corner at the given inward depth, ending at `center`. Returns None when
/// a waypoint leaves the region interior.
#[allow(clippy::too_many_arguments)]
fn ring_arm(
    verts: &[Point2],
    cum: &[f64],
    perim: f64,
    corner_pos: f64,
    e: Point2,
    erel: f64,
    depth: f64,
    ccw: bool,
    center: Point2,
    region: &JordanPolygon,
) -> Option<Vec<Point2>> {
    let n = verts.len();
    let walk_rel = |s: f64| -> f64 {
        if ccw {
            (s - corner_pos).rem_euclid(perim)
        } else {
            (corner_pos - s).rem_euclid(perim)
        }
    };
    let mut offsets: Vec<(f64, Point2)> = Vec::new();
    for i in 0..n {
        let r = walk_rel(cum[i]);
        if r > 0.0 && r < erel {
            offsets.push((r, verts[i] + inward_bisector(verts, i) * depth));
        }
    }
    offsets.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut eidx = None;
    for i in 0..n {
        let a = verts[i];
        let b = verts[(i + 1) % n];
        if on_segment(a, b, e) {
            eidx = Some(i);
            break;
        }
    }
    let eidx = eidx?;
    let a = verts[eidx];
    let b = verts[(eidx + 1) % n];
    let edge_dir = unit_or_zero(b - a);
    let inward = edge_dir.perp();
    // Distance along the walk from e back toward the corner before the
    // edge runs out.
    let room = if ccw { a.dist(e) } else { b.dist(e) };
    let margin = depth.min(room / 2.0);
    let approach = if margin > 0.0 {
        let back = if ccw {
            e - edge_dir * margin
        } else {
            e + edge_dir * margin
        };
        Some(back + inward * depth)
    } else {
        None
    };
    let mut arm = vec![e];
    if let Some(q) = approach {
        arm.push(q);
    }
    for (_, q) in offsets.iter().rev() {
        arm.push(*q);
    }
    arm.push(center);
    let arm = dedup_pts(&arm);
    for p in &arm[1..] {
        if region.locate(*p) != PointLocation::Inside {
            return None;
        }
    }
    Some(arm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::uniform_grid;
    use crate::geodesic::curves_non_crossing;
    use crate::linearize::{h_side, linearize_family, v_side};
    use crate::maps::BoundaryMap;
    use proptest::prelude::*;

    fn upper_arc() -> Vec<Point2> {
        vec![
            p2(-2.0, 0.0),
            p2(-1.2, 0.9),
            p2(0.0, 1.2),
            p2(1.2, 0.9),
            p2(2.0, 0.0),
        ]
    }

    fn lower_arc() -> Vec<Point2> {
        upper_arc().iter().map(|p| p2(p.x, -p.y)).collect()
    }

    fn zigzag_pair() -> (Vec<Point2>, Vec<Point2>) {
        (
            vec![
                p2(0.0, 0.0),
                p2(1.0, 0.8),
                p2(2.0, -0.3),
                p2(3.0, 0.9),
                p2(4.0, 0.0),
            ],
            vec![p2(0.0, 0.0), p2(1.0, -1.5), p2(3.0, -1.6), p2(4.0, 0.0)],
        )
    }

    fn square4() -> JordanPolygon {
        JordanPolygon::new(vec![p2(0.0, 0.0), p2(4.0, 0.0), p2(4.0, 4.0), p2(0.0, 4.0)]).unwrap()
    }

    fn plus_cross(center: Point2) -> Cross {
        Cross::new([
            vec![p2(0.0, 2.0), center],
            vec![p2(4.0, 2.0), center],
            vec![p2(2.0, 0.0), center],
            vec![p2(2.0, 4.0), center],
        ])
        .unwrap()
    }

    #[test]
    fn identical_curves_give_constant_family() {
        let g = upper_arc();
        let hf = HalfFixedHomotopy::new(&g, &g).unwrap();
        assert!(hf.is_constant());
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(hf.curve_at(t).unwrap().points(), &g[..]);
        }
        assert_eq!(hf.time_lipschitz_constant(16, 16).unwrap(), 0.0);
    }

    #[test]
    fn lens_midpoint_curve_is_the_chord() {
        let hf = HalfFixedHomotopy::new(&upper_arc(), &lower_arc()).unwrap();
        assert_eq!(hf.mid(), &[p2(-2.0, 0.0), p2(2.0, 0.0)]);
    }

    #[test]
    fn triangle_family_time_lipschitz_within_classical_bound() {
        let g0 = vec![p2(0.0, 0.0), p2(1.2, 1.5), p2(4.0, 0.0)];
        let g1 = vec![p2(0.0, 0.0), p2(2.3, -1.8), p2(4.0, 0.0)];
        let hf = HalfFixedHomotopy::new(&g0, &g1).unwrap();
        let c64 = hf.time_lipschitz_constant(64, 64).unwrap();
        let c128 = hf.time_lipschitz_constant(128, 128).unwrap();
        assert!(c64 <= 4.0 * 1.02, "constant {c64} above the 4 L bound");
        assert!(
            (c64 - c128).abs() <= 0.1 * c64,
            "constant unstable across resolutions: {c64} vs {c128}"
        );
    }

    #[test]
    fn family_curves_pairwise_disjoint_except_endpoints() {
        let (g0, g1) = zigzag_pair();
        let hf = HalfFixedHomotopy::new(&g0, &g1).unwrap();
        let ends = [g0[0], *g0.last().unwrap()];
        let curves: Vec<Vec<Point2>> = (0..=32)
            .map(|k| {
                hf.curve_at(k as f64 / 32.0)
                    .unwrap()
                    .points()
                    .to_vec()
            })
            .collect();
        for i in 0..curves.len() {
            for j in i + 1..curves.len() {
                let w = chains_meet(&curves[i], &curves[j], &ends).unwrap();
                assert!(
                    w.is_none(),
                    "curves {i} and {j} meet near {:?}",
                    w.unwrap()
                );
            }
        }
    }

    #[test]
    fn half_fixed_rejects_crossing_inputs() {
        let g0 = vec![p2(0.0, 0.0), p2(1.0, 1.0), p2(3.0, -1.0), p2(4.0, 0.0)];
        let g1 = vec![p2(0.0, 0.0), p2(1.0, -1.0), p2(3.0, 1.0), p2(4.0, 0.0)];
        match HalfFixedHomotopy::new(&g0, &g1) {
            Err(Error::DegenerateInput(msg)) => {
                assert!(msg.contains("meet away from their shared endpoints"))
            }
            other => panic!("expected a degenerate input error, got {other:?}"),
        }
    }

    #[test]
    fn half_fixed_exact_at_parameter_ends() {
        let (g0, g1) = zigzag_pair();
        let hf = HalfFixedHomotopy::new(&g0, &g1).unwrap();
        assert_eq!(hf.curve_at(0.0).unwrap().points(), &g0[..]);
        assert_eq!(hf.curve_at(1.0).unwrap().points(), &g1[..]);
    }

    #[test]
    fn opened_single_segment_matches_explicit_offsets() {
        let psi = [p2(0.0, 0.0), p2(1.0, 0.0)];
        let oc = OpenedCurve::new(&psi, &[0.0, 1.0], &[], 0.8).unwrap();
        assert!((oc.pad() - 0.1).abs() <= 1e-15);
        let plus = oc.plus_at(0.5);
        assert_eq!(plus.len(), 2);
        assert!(plus[0].dist(p2(0.0, 0.05)) <= 1e-15);
        assert!(plus[1].dist(p2(0.5, 0.0)) <= 1e-15);
        let minus = oc.minus_at(0.5);
        assert!(minus[0].dist(p2(0.0, -0.05)) <= 1e-15);
    }

    #[test]
    fn opened_split_points_follow_proportion_rule() {
        let psi = [p2(0.0, 0.0), p2(1.0, 0.2), p2(2.0, 0.0)];
        let oc = OpenedCurve::new(&psi, &[0.0, 0.4, 1.0], &[], 0.5).unwrap();
        let full = oc.split_point(1, 1.0, true).dist(psi[1]);
        assert!(full > 0.0);
        assert_eq!(oc.split_point(1, 0.4, true), psi[1]);
        let half = oc.split_point(1, 0.7, true).dist(psi[1]);
        assert!((half - 0.5 * full).abs() <= 1e-12 * full.max(1.0));
        assert!((oc.split_point(1, 1.0, true).dist(psi[1]) - full).abs() == 0.0);
    }

    #[test]
    fn opened_strands_disjoint_except_head() {
        let psi = [p2(0.0, 0.0), p2(1.0, 0.2), p2(2.0, 0.0)];
        let oc = OpenedCurve::new(&psi, &[0.0, 0.4, 1.0], &[], 0.5).unwrap();
        for t in [0.5, 0.9] {
            let head = oc.eval(t);
            let plus = oc.plus_at(t);
            let minus = oc.minus_at(t);
            let w = chains_meet(&plus, &minus, &[head]).unwrap();
            assert!(w.is_none(), "strands meet at {:?} for t = {t}", w.unwrap());
        }
    }

    #[test]
    fn route_skirts_a_blocking_wall() {
        let wall = [p2(2.0, -1.0), p2(2.0, 1.0)];
        let from = p2(0.0, 0.0);
        let to = p2(4.0, 0.0);
        let path =
            route_avoiding(from, to, &[(&wall, &[])], p2(2.0, 0.0), 5.0, 4.0).unwrap();
        assert_eq!(path[0], from);
        assert_eq!(*path.last().unwrap(), to);
        assert!(chain_simple(&path));
        assert!(chains_meet(&path, &wall, &[]).unwrap().is_none());
        assert!(chain_len(&path) < 6.0);
    }

    #[test]
    fn cross_deform_constant_when_target_is_center() {
        let cross = plus_cross(p2(2.0, 2.0));
        let k = square4();
        let cd = CrossDeform::new(&cross, p2(2.0, 2.0), &k, &k).unwrap();
        assert!(cd.is_constant());
        let out = cd.at(0.37).unwrap();
        assert_eq!(out.arms(), cross.arms());
    }

    #[test]
    fn cross_deform_migrates_center_into_corner() {
        let center = p2(2.0, 2.0);
        let cross = Cross::new([
            vec![p2(0.0, 2.0), center],
            vec![p2(2.0, 0.0), center],
            vec![p2(3.0, 2.6), center],
            vec![p2(2.6, 3.0), center],
        ])
        .unwrap();
        let k1 =
            JordanPolygon::new(vec![p2(0.0, 0.0), p2(2.4, 0.0), p2(2.4, 2.4), p2(0.0, 2.4)])
                .unwrap();
        let k2 =
            JordanPolygon::new(vec![p2(2.0, 2.0), p2(3.0, 2.6), p2(3.4, 3.4), p2(2.6, 3.0)])
                .unwrap();
        let target = p2(0.6, 0.6);
        let cd = CrossDeform::new(&cross, target, &k1, &k2).unwrap();
        let start = cd.at(0.0).unwrap();
        assert_eq!(start.arms(), cross.arms());
        for k in 0..=8 {
            let t = k as f64 / 8.0;
            let c = cd.at(t).unwrap();
            assert_eq!(c.ends(), cross.ends());
        }
        let end = cd.at(1.0).unwrap();
        assert!(end.center().dist(target) <= 1e-12);
        let ratio = cd.alpha_length_ratio();
        assert!((1.0..=4.0).contains(&ratio), "detour ratio {ratio}");
    }

    #[test]
    fn grid_level_constant_when_loops_match() {
        let sq = MarkedLoop::new(
            vec![p2(-2.0, -2.0), p2(2.0, -2.0), p2(2.0, 2.0), p2(-2.0, 2.0)],
            [0, 1, 2, 3],
        )
        .unwrap();
        let glh = GridLevelHomotopy::new(&sq, &sq).unwrap();
        assert!(glh.is_constant());
        assert_eq!(glh.at(0.3).unwrap(), sq.points());
    }

    #[test]
    fn concentric_squares_homotopy_nests() {
        let outer = MarkedLoop::new(
            vec![p2(-2.0, -2.0), p2(2.0, -2.0), p2(2.0, 2.0), p2(-2.0, 2.0)],
            [0, 1, 2, 3],
        )
        .unwrap();
        let inner = MarkedLoop::new(
            vec![p2(-1.0, -1.0), p2(1.0, -1.0), p2(1.0, 1.0), p2(-1.0, 1.0)],
            [0, 1, 2, 3],
        )
        .unwrap();
        let glh = GridLevelHomotopy::new(&outer, &inner).unwrap();
        let loops: Vec<Vec<Point2>> =
            (0..=16).map(|k| glh.at(k as f64 / 16.0).unwrap()).collect();
        let polys: Vec<JordanPolygon> = loops
            .iter()
            .map(|l| JordanPolygon::new(l.clone()).unwrap())
            .collect();
        for w in loops.windows(2).zip(&polys) {
            let (pair, prev_poly) = w;
            for p in &pair[1] {
                assert_ne!(
                    prev_poly.locate(*p),
                    PointLocation::Outside,
                    "node {p:?} escapes the previous loop"
                );
            }
        }
        for p in outer.points() {
            assert!(loops[0].contains(p));
        }
        assert_eq!(loops[16], inner.points());
    }

    #[test]
    fn identity_grid_level_two_loop_stays_simple() {
        let grids = vec![uniform_grid(2, 0.021).unwrap(), uniform_grid(3, 0.011).unwrap()];
        let pls = linearize_family(&BoundaryMap::Identity, &grids, 8).unwrap();
        let coarse_pts = pls[0].cell_curve(1, 1);
        let cv = pls[0].vertex_images();
        let cg = pls[0].grid();
        let corner_pts = [
            cv[cg.vidx(1, 1)],
            cv[cg.vidx(2, 1)],
            cv[cg.vidx(2, 2)],
            cv[cg.vidx(1, 2)],
        ];
        let mut corners = [0usize; 4];
        for (k, cp) in corner_pts.iter().enumerate() {
            corners[k] = coarse_pts
                .iter()
                .position(|p| key(*p) == key(*cp))
                .expect("cell corner missing from its own curve");
        }
        let gamma = MarkedLoop::new(coarse_pts.clone(), corners).unwrap();

        let fine = &pls[1];
        let plan: [(usize, bool); 8] = [
            (h_side(8, 2, 2), true),
            (h_side(8, 3, 2), true),
            (v_side(8, 4, 2), true),
            (v_side(8, 4, 3), true),
            (h_side(8, 3, 4), false),
            (h_side(8, 2, 4), false),
            (v_side(8, 2, 3), false),
            (v_side(8, 2, 2), false),
        ];
        let mut hat_pts: Vec<Point2> = Vec::new();
        let mut hat_corners = [0usize; 4];
        for (k, (s, fwd)) in plan.iter().enumerate() {
            if k % 2 == 0 {
                hat_corners[k / 2] = hat_pts.len();
            }
            let mut run = fine.sides()[*s].points.clone();
            if !fwd {
                run.reverse();
            }
            hat_pts.extend_from_slice(&run[..run.len() - 1]);
        }
        let hat = MarkedLoop::new(hat_pts, hat_corners).unwrap();
        let fv = fine.vertex_images();
        let fg = fine.grid();
        assert_eq!(hat.corner_point(0), fv[fg.vidx(2, 2)]);
        assert_eq!(hat.corner_point(1), fv[fg.vidx(4, 2)]);
        assert_eq!(hat.corner_point(2), fv[fg.vidx(4, 4)]);
        assert_eq!(hat.corner_point(3), fv[fg.vidx(2, 4)]);

        let glh = GridLevelHomotopy::new(&gamma, &hat).unwrap();
        let mut prev: Option<PolyLine> = None;
        for k in 0..=32 {
            let t = k as f64 / 32.0;
            let pts = glh.at(t).unwrap();
            JordanPolygon::new(pts.clone())
                .unwrap_or_else(|e| panic!("loop not simple at t = {t}: {e}"));
            let closed = PolyLine::new(closed_chain(&pts)).unwrap();
            if let Some(ref prev_pl) = prev {
                assert!(
                    curves_non_crossing(prev_pl, &closed).unwrap(),
                    "consecutive loops cross near t = {t}"
                );
            }
            prev = Some(closed);
        }

        let start = glh.at(0.0).unwrap();
        for p in gamma.points() {
            assert!(start.contains(p), "start loop lost an input node");
        }
        let closed_gamma = closed_chain(gamma.points());
        for p in &start {
            let mut d = f64::INFINITY;
            for w in closed_gamma.windows(2) {
                d = d.min(point_segment_distance(w[0], w[1], *p));
            }
            assert!(d <= 1e-12, "start loop strays {d} from the input loop");
        }
        assert_eq!(glh.at(1.0).unwrap(), hat.points());
    }

    #[test]
    fn t_fix_plus_cross_in_square() {
        let region = square4();
        let t_mid = plus_cross(p2(2.0, 2.0));
        let t_bot = plus_cross(p2(2.2, 1.9));
        let fix = build_t_fix(&t_mid, &t_bot, &region).unwrap();
        assert_eq!(cross_intersection_counts(&fix, &t_mid).unwrap(), [0, 0, 1, 1]);
        assert_eq!(cross_intersection_counts(&fix, &t_bot).unwrap(), [0, 0, 1, 1]);
        let mut fix_ends = fix.ends().to_vec();
        let mut mid_ends = t_mid.ends().to_vec();
        let sort = |v: &mut Vec<Point2>| {
            v.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap())
        };
        sort(&mut fix_ends);
        sort(&mut mid_ends);
        assert_eq!(fix_ends, mid_ends);
        let corner_dist = region
            .verts()
            .iter()
            .map(|v| v.dist(fix.center()))
            .fold(f64::INFINITY, f64::min);
        assert!(corner_dist <= 0.2, "center {corner_dist} from nearest corner");
    }

    #[test]
    fn t_fix_prenudges_boundary_hugging_arms() {
        let region = square4();
        let center = p2(2.2, 1.9);
        let t_mid = Cross::new([
            vec![p2(0.0, 2.0), center],
            vec![p2(4.0, 2.0), center],
            vec![p2(2.0, 0.0), p2(3.0, 0.0), center],
            vec![p2(2.0, 4.0), center],
        ])
        .unwrap();
        let nudged = nudge_cross_inward(&t_mid, &region, 0.1).unwrap();
        for arm in nudged.arms() {
            for p in &arm[1..] {
                assert_eq!(region.locate(*p), PointLocation::Inside);
            }
        }
        let t_bot = plus_cross(center);
        let fix = build_t_fix(&t_mid, &t_bot, &region).unwrap();
        assert_eq!(cross_intersection_counts(&fix, &t_bot).unwrap(), [0, 0, 1, 1]);
    }

    #[test]
    fn cross_new_rejects_touching_arms() {
        let center = p2(2.0, 2.0);
        let arms = [
            vec![p2(0.0, 0.0), center],
            vec![p2(4.0, 0.0), center],
            vec![p2(0.0, 2.0), p2(1.0, 1.0), center],
            vec![p2(2.0, 4.0), center],
        ];
        match Cross::new(arms) {
            Err(Error::NonSimple(msg)) => assert!(msg.contains("away from the center")),
            other => panic!("expected a non-simple error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn half_fixed_triangle_families(
            ax in 0.8..3.2f64,
            ay in 0.6..2.2f64,
            bx in 0.8..3.2f64,
            by in -2.2..-0.6f64,
        ) {
            let a = p2(0.0, 0.0);
            let b = p2(4.0, 0.0);
            let g0 = vec![a, p2(ax, ay), b];
            let g1 = vec![a, p2(bx, by), b];
            let hf = HalfFixedHomotopy::new(&g0, &g1).unwrap();
            let start = hf.curve_at(0.0).unwrap();
            let end = hf.curve_at(1.0).unwrap();
            prop_assert_eq!(start.points(), &g0[..]);
            prop_assert_eq!(end.points(), &g1[..]);
            let c = hf.time_lipschitz_constant(64, 64).unwrap();
            prop_assert!(c <= 4.0 * 1.05, "constant {} above the 4 L bound", c);
            let curves: Vec<Vec<Point2>> = (0..=8)
                .map(|k| hf.curve_at(k as f64 / 8.0).unwrap().points().to_vec())
                .collect();
            for i in 0..curves.len() {
                for j in i + 1..curves.len() {
                    prop_assert!(
                        chains_meet(&curves[i], &curves[j], &[a, b]).unwrap().is_none(),
                        "curves {} and {} meet", i, j
                    );
                }
            }
        }
    }
}
