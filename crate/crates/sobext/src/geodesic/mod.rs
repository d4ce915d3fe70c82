//! Shortest curves in closed PL Jordan domains and the
//! horizontal-chord extension operator built on them.
//!
//! The parameter domain is the diamond S with corners (0,-1), (1,0),
//! (0,1), (-1,0). Boundary points are addressed by a coordinate
//! w in [0,4), one unit per side, counterclockwise from the bottom
//! corner. The horizontal chord at height s meets the boundary at
//! w = 3-s on the left and w = 1+s on the right; the extension maps
//! that chord onto the geodesic joining the two image points, at
//! constant speed.
//!
//! Geodesics are computed by triangulation plus funnel; an
//! independent visibility-graph oracle exists for cross-checking.

pub mod funnel;
pub mod visibility;

pub use funnel::shortest_path;
pub use visibility::shortest_path_oracle;

use crate::error::{Error, Result};
use crate::plgeom::{
    eval_constant_speed, p2, point_segment_distance, points_diameter, segments_intersect,
    JordanPolygon, Point2, PointLocation, PolyLine, SegmentMeet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

pub const DIAMOND_CORNERS: [Point2; 4] = [
    Point2 { x: 0.0, y: -1.0 },
    Point2 { x: 1.0, y: 0.0 },
    Point2 { x: 0.0, y: 1.0 },
    Point2 { x: -1.0, y: 0.0 },
];

pub fn diamond() -> JordanPolygon {
    JordanPolygon::new(DIAMOND_CORNERS.to_vec()).expect("diamond is simple")
}

/// Point of the diamond boundary at coordinate w (taken mod 4).
pub fn diamond_boundary_point(w: f64) -> Point2 {
    let w = w.rem_euclid(4.0);
    let i = (w.floor() as usize).min(3);
    DIAMOND_CORNERS[i].lerp(DIAMOND_CORNERS[(i + 1) % 4], w - i as f64)
}

/// Boundary coordinate of the left endpoint of the chord at height s.
pub fn chord_left_param(s: f64) -> f64 {
    3.0 - s
}

/// Boundary coordinate of the right endpoint of the chord at height s.
pub fn chord_right_param(s: f64) -> f64 {
    1.0 + s
}

/// Affine change of variables taking the unit square onto the diamond:
/// (0,0), (1,0), (1,1), (0,1) go to the four corners in order.
pub fn square_to_diamond(p: Point2) -> Point2 {
    p2(p.x - p.y, p.x + p.y - 1.0)
}

pub fn diamond_to_square(z: Point2) -> Point2 {
    p2((z.x + z.y + 1.0) / 2.0, (z.y - z.x + 1.0) / 2.0)
}

/// Piecewise-linear boundary homeomorphism from the diamond boundary
/// onto a PL Jordan curve, given by breakpoints (w, image) with w
/// strictly increasing in [0,4). Between breakpoints the image moves
/// along straight segments, so the image curve is the polygon through
/// the breakpoint images in cyclic order.
#[derive(Debug, Clone)]
pub struct BoundaryParam {
    brk: Vec<(f64, Point2)>,
    target: JordanPolygon,
}

impl BoundaryParam {
    /// Validates the breakpoints and the simplicity of the image
    /// curve. An image loop that merely pinches (repeated vertex, or
    /// vertex exactly on a non-adjacent side) is separated by
    /// [`inflate_pinched`] before failing.
    pub fn new(brk: Vec<(f64, Point2)>) -> Result<BoundaryParam> {
        if brk.len() < 3 {
            return Err(Error::DegenerateInput(
                "boundary map needs >= 3 breakpoints".into(),
            ));
        }
        for &(w, p) in &brk {
            if !w.is_finite() || !(0.0..4.0).contains(&w) || !p.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "breakpoint w = {w} outside [0,4) or non-finite image"
                )));
            }
        }
        if !brk.windows(2).all(|ab| ab[0].0 < ab[1].0) {
            return Err(Error::DegenerateInput(
                "breakpoint coordinates must strictly increase".into(),
            ));
        }
        let images: Vec<Point2> = brk.iter().map(|&(_, p)| p).collect();
        match JordanPolygon::new(images.clone()) {
            Ok(target) => Ok(BoundaryParam { brk, target }),
            Err(_) => {
                let inflated = inflate_pinched(&images);
                let target = JordanPolygon::new(inflated.clone())?;
                let brk = brk
                    .iter()
                    .zip(inflated)
                    .map(|(&(w, _), p)| (w, p))
                    .collect();
                Ok(BoundaryParam { brk, target })
            }
        }
    }

    /// The identity parametrization of the diamond boundary.
    pub fn identity() -> BoundaryParam {
        BoundaryParam::new(
            (0..4)
                .map(|i| (i as f64, DIAMOND_CORNERS[i]))
                .collect(),
        )
        .expect("identity boundary map is valid")
    }

    /// Samples `f` on the diamond boundary at `per_side` equal w-steps
    /// per side and interpolates in between.
    pub fn from_fn(f: impl Fn(Point2) -> Point2, per_side: usize) -> Result<BoundaryParam> {
        if per_side == 0 {
            return Err(Error::DegenerateInput("per_side must be positive".into()));
        }
        let n = 4 * per_side;
        BoundaryParam::new(
            (0..n)
                .map(|j| {
                    let w = 4.0 * j as f64 / n as f64;
                    (w, f(diamond_boundary_point(w)))
                })
                .collect(),
        )
    }

    pub fn breakpoints(&self) -> &[(f64, Point2)] {
        &self.brk
    }

    /// The image Jordan polygon; geodesics are taken in its closure.
    pub fn target(&self) -> &JordanPolygon {
        &self.target
    }

    /// Image of the boundary point at coordinate w (taken mod 4).
    pub fn eval(&self, w: f64) -> Point2 {
        let w = w.rem_euclid(4.0);
        let n = self.brk.len();
        let i = match self
            .brk
            .binary_search_by(|probe| probe.0.partial_cmp(&w).unwrap())
        {
            Ok(i) => return self.brk[i].1,
            Err(0) => n - 1,
            Err(i) => i - 1,
        };
        let (w0, p0) = self.brk[i];
        let (w1, p1) = self.brk[(i + 1) % n];
        let span = if w1 <= w0 { w1 + 4.0 - w0 } else { w1 - w0 };
        let dw = if w >= w0 { w - w0 } else { w + 4.0 - w0 };
        p0.lerp(p1, dw / span)
    }

    /// Length of the image of the forward boundary arc from w_from to
    /// w_to. Equal coordinates give 0, not the whole perimeter.
    pub fn arc_image_length(&self, w_from: f64, w_to: f64) -> f64 {
        let a = w_from.rem_euclid(4.0);
        let span = (w_to - w_from).rem_euclid(4.0);
        if span == 0.0 {
            return 0.0;
        }
        let mut inner: Vec<(f64, Point2)> = self
            .brk
            .iter()
            .filter_map(|&(wi, p)| {
                let d = (wi - a).rem_euclid(4.0);
                (d > 0.0 && d < span).then_some((d, p))
            })
            .collect();
        inner.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let mut len = 0.0;
        let mut prev = self.eval(a);
        for (_, p) in inner {
            len += prev.dist(p);
            prev = p;
        }
        len + prev.dist(self.eval(w_to))
    }

    /// Image length of the shorter of the two boundary arcs between
    /// w1 and w2.
    pub fn shorter_arc_image_length(&self, w1: f64, w2: f64) -> f64 {
        self.arc_image_length(w1, w2)
            .min(self.arc_image_length(w2, w1))
    }
}

/// Separates pinch points of an almost-Jordan vertex loop: a vertex
/// that coincides with another vertex, or sits on a non-adjacent
/// side, is nudged toward the midpoint of its two neighbors by 1e-9
/// times the loop diameter. Genuinely crossing loops stay broken; the
/// caller revalidates.
pub fn inflate_pinched(verts: &[Point2]) -> Vec<Point2> {
    let n = verts.len();
    let eps = 1e-9 * points_diameter(verts).max(f64::MIN_POSITIVE);
    let mut out = verts.to_vec();
    for i in 0..n {
        let p = verts[i];
        let mut pinched = (0..n).any(|j| j != i && verts[j] == p);
        if !pinched {
            pinched = (0..n)
                .filter(|&j| j != i && (j + 1) % n != i)
                .any(|j| point_segment_distance(verts[j], verts[(j + 1) % n], p) <= eps);
        }
        if pinched {
            let m = verts[(i + n - 1) % n].lerp(verts[(i + 1) % n], 0.5);
            let d = m - p;
            let dn = d.norm();
            if dn > 0.0 {
                out[i] = p + d * (eps.min(dn / 2.0) / dn);
            }
        }
    }
    out
}

/// Inserts `q` as a vertex of the loop when it lies within `tol` of
/// the nearest side and is not a vertex already. Geodesic queries
/// insert their endpoints so that point location on them stays exact
/// even when the endpoint is a rounded interior point of a side.
fn with_boundary_vertex(verts: &mut Vec<Point2>, q: Point2, tol: f64) {
    if verts.iter().any(|&v| v == q) {
        return;
    }
    let n = verts.len();
    let (mut bi, mut bd) = (0usize, f64::INFINITY);
    for i in 0..n {
        let d = point_segment_distance(verts[i], verts[(i + 1) % n], q);
        if d < bd {
            bd = d;
            bi = i;
        }
    }
    if bd <= tol {
        verts.insert(bi + 1, q);
    }
}

/// Heights are memoized at the dyadic resolution i/4096; other
/// heights are recomputed per query so no interpolation error enters.
const CACHE_DENOM: f64 = 4096.0;

/// The horizontal-chord extension of a boundary parametrization: each
/// chord of the diamond goes onto the geodesic between its endpoint
/// images at constant speed.
pub struct ShortestCurveExtension {
    phi: BoundaryParam,
    cache: RwLock<HashMap<i32, Arc<PolyLine>>>,
}

impl ShortestCurveExtension {
    pub fn new(phi: BoundaryParam) -> ShortestCurveExtension {
        ShortestCurveExtension {
            phi,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn boundary(&self) -> &BoundaryParam {
        &self.phi
    }

    pub fn target(&self) -> &JordanPolygon {
        self.phi.target()
    }

    pub fn cached_levels(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    /// Ambient polygon and endpoint pair for the geodesic at height
    /// s: the target polygon with the two endpoint images inserted as
    /// vertices.
    pub fn geodesic_ambient(&self, s: f64) -> Result<(JordanPolygon, Point2, Point2)> {
        let a = self.phi.eval(chord_left_param(s));
        let b = self.phi.eval(chord_right_param(s));
        let target = self.phi.target();
        let mut verts = target.verts().to_vec();
        let scale = target.diameter()
            + verts
                .iter()
                .fold(0.0f64, |m, v| m.max(v.x.abs()).max(v.y.abs()));
        let tol = 1e-9 * scale;
        with_boundary_vertex(&mut verts, a, tol);
        with_boundary_vertex(&mut verts, b, tol);
        Ok((JordanPolygon::new(verts)?, a, b))
    }

    /// Shortest curve joining the images of the chord endpoints at
    /// height s, inside the closed target region.
    pub fn geodesic_at(&self, s: f64) -> Result<Arc<PolyLine>> {
        if !(-1.0..=1.0).contains(&s) {
            return Err(Error::OutOfDomain(format!(
                "chord height {s} outside [-1,1]"
            )));
        }
        let key = s * CACHE_DENOM;
        let dyadic = key.fract() == 0.0;
        if dyadic {
            if let Some(g) = self.cache.read().unwrap().get(&(key as i32)) {
                return Ok(g.clone());
            }
        }
        let g = Arc::new(self.compute_geodesic(s)?);
        if dyadic {
            // Insert-once: a racing writer computed the same curve.
            return Ok(self
                .cache
                .write()
                .unwrap()
                .entry(key as i32)
                .or_insert(g)
                .clone());
        }
        Ok(g)
    }

    fn compute_geodesic(&self, s: f64) -> Result<PolyLine> {
        let (ambient, a, b) = self.geodesic_ambient(s)?;
        if a == b {
            return PolyLine::new(vec![a]);
        }
        funnel::shortest_path(&ambient, a, b)
    }

    /// The extension at z in the closed diamond: the point at the
    /// matching constant-speed parameter along the geodesic of z's
    /// horizontal chord. On the diamond boundary this reproduces the
    /// boundary parametrization exactly.
    pub fn eval(&self, z: Point2) -> Result<Point2> {
        if z.x.abs() + z.y.abs() > 1.0 + 1e-12 {
            return Err(Error::OutOfDomain(format!(
                "({}, {}) outside the diamond",
                z.x, z.y
            )));
        }
        let s = z.y.clamp(-1.0, 1.0);
        let g = self.geodesic_at(s)?;
        let half = 1.0 - s.abs();
        if half == 0.0 {
            return Ok(g.first());
        }
        let t = ((z.x + half) / (2.0 * half)).clamp(0.0, 1.0);
        eval_constant_speed(&g, t)
    }

    /// eval composed with the square-to-diamond change of variables,
    /// for callers whose parameter cell is the unit square.
    pub fn eval_square(&self, p: Point2) -> Result<Point2> {
        self.eval(square_to_diamond(p))
    }
}

/// Empirical Lipschitz constant of `f` on `region`: the largest ratio
/// |f(x)-f(y)| / |x-y| over `n` sampled pairs, with separations drawn
/// at the dyadic scales 2^-1 .. 2^-10. `f` may decline a sample by
/// returning None.
pub fn lipschitz_estimate<F>(f: F, region: &JordanPolygon, n: usize, seed: u64) -> f64
where
    F: Fn(Point2) -> Option<Point2>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = bounding_box(region);
    let mut best = 0.0f64;
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < n && attempts < 200 * n {
        attempts += 1;
        let x = p2(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y));
        if region.locate(x) == PointLocation::Outside {
            continue;
        }
        let r = 2f64.powi(-rng.gen_range(1..=10));
        let th = rng.gen_range(0.0..std::f64::consts::TAU);
        let y = x + p2(r * th.cos(), r * th.sin());
        if region.locate(y) == PointLocation::Outside {
            continue;
        }
        let (Some(fx), Some(fy)) = (f(x), f(y)) else {
            continue;
        };
        let d = x.dist(y);
        if d == 0.0 {
            continue;
        }
        best = best.max(fx.dist(fy) / d);
        accepted += 1;
    }
    best
}

/// Empirical time-Lipschitz constant of a one-parameter family of
/// extensions over t in [0,1]: the largest ratio
/// |H_{t1}(z) - H_{t2}(z)| / |t1-t2| over sampled (t1, t2, z).
pub fn family_time_lipschitz<F>(family: F, n: usize, seed: u64) -> Result<f64>
where
    F: Fn(f64) -> Result<ShortestCurveExtension>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while accepted < n && attempts < 200 * n {
        attempts += 1;
        let t1: f64 = rng.gen();
        let mag = 2f64.powi(-rng.gen_range(1..=10));
        let dt = if rng.gen::<bool>() { mag } else { -mag };
        let t2 = (t1 + dt).clamp(0.0, 1.0);
        if t2 == t1 {
            continue;
        }
        let z = sample_diamond(&mut rng);
        let h1 = family(t1)?.eval(z)?;
        let h2 = family(t2)?.eval(z)?;
        best = best.max(h1.dist(h2) / (t2 - t1).abs());
        accepted += 1;
    }
    Ok(best)
}

/// True when the two polylines never cross transversally through
/// segment interiors; touching at points or along shared subarcs is
/// allowed.
pub fn curves_non_crossing(c1: &PolyLine, c2: &PolyLine) -> Result<bool> {
    let p1 = c1.points();
    let p2 = c2.points();
    for i in 0..p1.len().saturating_sub(1) {
        for j in 0..p2.len().saturating_sub(1) {
            if segments_intersect(p1[i], p1[i + 1], p2[j], p2[j + 1])?
                == SegmentMeet::InteriorCross
            {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn bounding_box(poly: &JordanPolygon) -> (Point2, Point2) {
    let mut lo = poly.verts()[0];
    let mut hi = lo;
    for v in poly.verts() {
        lo.x = lo.x.min(v.x);
        lo.y = lo.y.min(v.y);
        hi.x = hi.x.max(v.x);
        hi.y = hi.y.max(v.y);
    }
    (lo, hi)
}

fn sample_diamond(rng: &mut ChaCha8Rng) -> Point2 {
    loop {
        let p = p2(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if p.x.abs() + p.y.abs() < 1.0 {
            return p;
        }
    }
}
