//! The zoo of planar boundary maps fed into the pipeline: identity,
//! affine, three pathological homeomorphisms (saw shear, radial power,
//! Cantor shear), a smooth warp, sampled piecewise-bilinear maps, and an
//! affine conjugation hook.
//!
//! Every variant evaluates exactly where closed forms exist. SawShear in
//! particular works at scales far below f64 spacing (tooth periods down
//! to 10^-75), so its saw terms and pair differences run through exact
//! dyadic-rational reduction.

use crate::error::{Error, Result};
use crate::plgeom::{p2, Point2};
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BoundaryMap {
    Identity,
    Affine(AffineMap),
    /// (x, y) -> (x, y + sum_j 10^-j s(x 10^{n_j})) with s the 1-periodic
    /// triangle saw. Continuous, injective, first coordinate preserved.
    SawShear(SawShear),
    /// x -> x |x|^(alpha-1) on the unit disk, identity outside it.
    RadialPower { alpha: f64 },
    /// (x, y) -> (x + C(x), y) with C a Cantor staircase.
    CantorShear(CantorShear),
    /// (x, y) -> (x + amp sin(pi x) sin(pi y), y); a diffeomorphism of
    /// the square fixing its boundary for |amp| pi < 1.
    SmoothWarp { amp: f64 },
    Sampled(SampledMap),
    /// post . inner . pre, used to re-seat disk-based maps on the square.
    Conjugated {
        pre: AffineMap,
        inner: Box<BoundaryMap>,
        post: AffineMap,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// Row-major linear part.
    pub lin: [[f64; 2]; 2],
    pub off: [f64; 2],
}

impl AffineMap {
    pub fn identity() -> AffineMap {
        AffineMap { lin: [[1.0, 0.0], [0.0, 1.0]], off: [0.0, 0.0] }
    }
    pub fn scale_about(center: Point2, factor: f64) -> AffineMap {
        AffineMap {
            lin: [[factor, 0.0], [0.0, factor]],
            off: [center.x * (1.0 - factor), center.y * (1.0 - factor)],
        }
    }
    pub fn apply(&self, x: Point2) -> Point2 {
        p2(
            self.lin[0][0] * x.x + self.lin[0][1] * x.y + self.off[0],
            self.lin[1][0] * x.x + self.lin[1][1] * x.y + self.off[1],
        )
    }
    pub fn det(&self) -> f64 {
        self.lin[0][0] * self.lin[1][1] - self.lin[0][1] * self.lin[1][0]
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// Largest singular value of a 2x2 matrix, exact for diagonal input.
pub fn op_norm2(j: [[f64; 2]; 2]) -> f64 {
    let (a, b, c, d) = (j[0][0], j[0][1], j[1][0], j[1][1]);
    let e = (a + d) / 2.0;
    let f = (a - d) / 2.0;
    let g = (c + b) / 2.0;
    let h = (c - b) / 2.0;
    f64::hypot(e, h) + f64::hypot(f, g)
}

// ---------------------------------------------------------------------
// Saw shear

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SawShear {
    /// Exponent the tooth schedule was built for (> 1).
    pub q: f64,
    /// Tooth scale exponents n_1 < ... < n_J; term j is 10^-j s(x 10^{n_j}).
    pub n_seq: Vec<u32>,
}

impl SawShear {
    /// Greedy minimal schedule: each n_k is the smallest integer above
    /// n_{k-1} with (q-1) n_k / 2 >= k q + k log10(2) and
    /// 10^{n_k / 2} >= 8 * 10^k * sum_{j<k} 2 * 10^{n_j - j}.
    pub fn new(q: f64, depth: usize) -> Result<SawShear> {
        if !(q > 1.0) {
            return Err(Error::Config(format!("saw schedule needs q > 1, got {q}")));
        }
        let mut n_seq: Vec<u32> = Vec::with_capacity(depth);
        for k in 1..=depth {
            let kf = k as f64;
            let first = 2.0 * (kf * q + kf * std::f64::consts::LOG10_2) / (q - 1.0);
            // log10 of sum_{j<k} 2*10^{n_j - j}, evaluated as max + residual.
            let second = if n_seq.is_empty() {
                f64::NEG_INFINITY
            } else {
                let logs: Vec<f64> = n_seq
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| n as f64 - (i as f64 + 1.0) + std::f64::consts::LOG10_2)
                    .collect();
                let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let resid: f64 = logs.iter().map(|l| 10f64.powf(l - top)).sum();
                let log_sum = top + resid.log10();
                2.0 * (8f64.log10() + kf + log_sum)
            };
            let min_allowed = n_seq.last().map_or(1, |&n| n + 1) as f64;
            let n = first.max(second).max(min_allowed).ceil() as u32;
            n_seq.push(n);
        }
        Ok(SawShear { q, n_seq })
    }

    /// Displacement of the second coordinate at x, truncated to the
    /// schedule's depth.
    pub fn displacement(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        let mut w = 1.0;
        for &n in &self.n_seq {
            w *= 0.1;
            acc += w * saw(frac_pow10(x, n));
        }
        acc
    }

    /// d/dx of the displacement where defined (off tooth corners).
    pub fn displacement_slope(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (j, &n) in self.n_seq.iter().enumerate() {
            let f = frac_pow10(x, n);
            let sign = if f < 0.5 { 2.0 } else { -2.0 };
            acc += 0.1f64.powi(j as i32 + 1) * sign * 10f64.powi(n as i32);
        }
        acc
    }

    /// Exact displacement difference between x and x + dx, with the sum
    /// x + dx formed in dyadic-rational arithmetic so sub-f64-spacing
    /// offsets are honored.
    pub fn displacement_delta(&self, x: f64, dx: f64) -> f64 {
        let (mx, ex) = dyadic_decompose(x);
        let (md, ed) = dyadic_decompose(dx);
        let (my, ey) = dyadic_add((mx, ex), (md, ed));
        let mut acc = 0.0;
        let mut w = 1.0;
        for &n in &self.n_seq {
            w *= 0.1;
            let sy = saw(frac_pow10_dyadic(&my, ey, n));
            let sx = saw(frac_pow10(x, n));
            acc += w * (sy - sx);
        }
        acc
    }

    /// Kink parameters of x -> displacement(x) restricted to [a, b],
    /// as fractions of b - a; None if they cannot be enumerated under
    /// the cap. Teeth of scale n kink at multiples of 10^-n / 2.
    pub fn breakpoints(&self, a: f64, b: f64, cap: usize) -> Option<Vec<f64>> {
        let n = *self.n_seq.last()?;
        let step = 0.5 * 10f64.powi(-(n as i32));
        let count = (b - a) / step;
        if !(count.is_finite() && count < cap as f64) {
            return None;
        }
        let mut out = Vec::new();
        let mut m = (a / step).floor() as i64 + 1;
        loop {
            let x = m as f64 * step;
            if x >= b {
                break;
            }
            if x > a {
                out.push((x - a) / (b - a));
            }
            m += 1;
        }
        Some(out)
    }
}

/// 1-periodic triangle saw on [0,1): 2x up to 1 at x = 1/2, back to 0.
pub fn saw(f: f64) -> f64 {
    if f <= 0.5 {
        2.0 * f
    } else {
        2.0 - 2.0 * f
    }
}

/// (mantissa, exponent) with |x| = m * 2^e exactly. x must be finite.
fn dyadic_decompose(x: f64) -> (BigUint, i64) {
    let bits = x.abs().to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i64;
    let frac_field = bits & ((1u64 << 52) - 1);
    if exp_field == 0 {
        (BigUint::from(frac_field), -1074)
    } else {
        (BigUint::from(frac_field | (1u64 << 52)), exp_field - 1075)
    }
}

fn dyadic_add(a: (BigUint, i64), b: (BigUint, i64)) -> (BigUint, i64) {
    let e = a.1.min(b.1);
    let ma = a.0 << (a.1 - e) as u32;
    let mb = b.0 << (b.1 - e) as u32;
    (ma + mb, e)
}

/// Fractional part of (m 2^e) * 10^n, computed exactly and rounded once.
fn frac_pow10_dyadic(m: &BigUint, e: i64, n: u32) -> f64 {
    if m.is_zero() {
        return 0.0;
    }
    // m * 10^n * 2^e = (m * 5^n) * 2^(e + n).
    let shift = -(e + n as i64);
    if shift <= 0 {
        return 0.0; // integer
    }
    let v = m * BigUint::from(5u32).pow(n);
    let mask = (BigUint::one() << shift as u64) - BigUint::one();
    let r = v & mask;
    if r.is_zero() {
        return 0.0;
    }
    let bl = r.bits();
    let take = bl.min(54);
    let top = (&r >> (bl - take)).to_u64().unwrap() as f64;
    top * 2f64.powi((bl - take) as i32 - shift as i32)
}

/// Fractional part of x * 10^n for finite x, exact reduction. Negative x
/// wraps periodically.
pub fn frac_pow10(x: f64, n: u32) -> f64 {
    let (m, e) = dyadic_decompose(x);
    let f = frac_pow10_dyadic(&m, e, n);
    if x < 0.0 && f != 0.0 {
        1.0 - f
    } else {
        f
    }
}

// ---------------------------------------------------------------------
// Cantor shear

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CantorShear {
    /// Gap ratio: each step removes the middle 1/k of an interval (k >= 2).
    pub k: u32,
    /// Recursion depth; truncation error of the staircase <= 2^-depth.
    pub depth: u32,
}

impl CantorShear {
    pub fn new(k: u32, depth: u32) -> Result<CantorShear> {
        if k < 2 {
            return Err(Error::Config("Cantor ratio parameter must be >= 2".into()));
        }
        Ok(CantorShear { k, depth })
    }

    /// Holder exponent of the staircase: log(1/2) / log((1 - 1/k)/2).
    pub fn holder_alpha(&self) -> f64 {
        let a = (1.0 - 1.0 / self.k as f64) / 2.0;
        0.5f64.ln() / a.ln()
    }

    /// Staircase value, clamped to 0 left of [0,1] and 1 right of it.
    pub fn staircase(&self, x: f64) -> f64 {
        self.staircase_with_slope(x).0
    }

    /// (C(x), C'(x)) of the depth-truncated staircase; the truncated
    /// function is piecewise linear, interpolating inside unresolved
    /// leaves, so the slope is finite everywhere off breakpoints.
    pub fn staircase_with_slope(&self, x: f64) -> (f64, f64) {
        if x <= 0.0 {
            return (0.0, 0.0);
        }
        if x >= 1.0 {
            return (1.0, 0.0);
        }
        let a = (1.0 - 1.0 / self.k as f64) / 2.0;
        let mut x = x;
        let mut acc = 0.0;
        let mut scale = 1.0;
        let mut slope = 1.0;
        for _ in 0..self.depth {
            if x < a {
                x /= a;
            } else if x > 1.0 - a {
                x = (x - (1.0 - a)) / a;
                acc += 0.5 * scale;
            } else {
                return (acc + 0.5 * scale, 0.0);
            }
            scale *= 0.5;
            slope *= 0.5 / a;
        }
        (acc + scale * x, slope)
    }

    /// g(x) = x + C(x); strictly increasing on all of R.
    pub fn g(&self, x: f64) -> f64 {
        if x <= 0.0 {
            x
        } else if x >= 1.0 {
            x + 1.0
        } else {
            x + self.staircase(x)
        }
    }

    /// Breakpoint parameters of g on [a, b] (fractions of b - a): the
    /// resolved gap/leaf endpoints of the truncated staircase.
    pub fn breakpoints(&self, a: f64, b: f64, cap: usize) -> Option<Vec<f64>> {
        let ratio = (1.0 - 1.0 / self.k as f64) / 2.0;
        let mut out = Vec::new();
        let mut stack = vec![(0.0f64, 1.0f64, 0u32)];
        while let Some((lo, hi, d)) = stack.pop() {
            if hi <= a || lo >= b {
                continue;
            }
            if d == self.depth {
                continue;
            }
            let w = hi - lo;
            let l_end = lo + w * ratio;
            let r_start = hi - w * ratio;
            for &t in &[l_end, r_start] {
                if t > a && t < b {
                    out.push((t - a) / (b - a));
                    if out.len() > cap {
                        return None;
                    }
                }
            }
            stack.push((lo, l_end, d + 1));
            stack.push((r_start, hi, d + 1));
        }
        out.sort_by(|x, y| x.partial_cmp(y).unwrap());
        out.dedup();
        Some(out)
    }
}

// ---------------------------------------------------------------------
// Sampled piecewise-bilinear map

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledMap {
    /// Cells per axis on [0,1]^2.
    pub resolution: u32,
    /// Images of the (resolution+1)^2 lattice vertices, row-major.
    pub vertex_images: Vec<[f64; 2]>,
}

impl SampledMap {
    pub fn new(resolution: u32, vertex_images: Vec<[f64; 2]>) -> Result<SampledMap> {
        let n = resolution as usize + 1;
        if vertex_images.len() != n * n {
            return Err(Error::Config(format!(
                "expected {} vertex images, got {}",
                n * n,
                vertex_images.len()
            )));
        }
        let m = SampledMap { resolution, vertex_images };
        m.validate()?;
        Ok(m)
    }

    /// Distinct vertex images and nondegenerate lattice edges.
    fn validate(&self) -> Result<()> {
        let n = self.resolution as usize + 1;
        let mut sorted: Vec<(u64, u64, usize)> = self
            .vertex_images
            .iter()
            .enumerate()
            .map(|(i, v)| (v[0].to_bits(), v[1].to_bits(), i))
            .collect();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::NonSimple(format!(
                    "vertices {} and {} share an image",
                    w[0].2, w[1].2
                )));
            }
        }
        for j in 0..n {
            for i in 0..n {
                if i + 1 < n {
                    let a = self.vertex_images[j * n + i];
                    let b = self.vertex_images[j * n + i + 1];
                    if a == b {
                        return Err(Error::NonSimple("degenerate horizontal edge".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Samples `f` on the lattice.
    pub fn from_fn(resolution: u32, f: impl Fn(Point2) -> Point2) -> Result<SampledMap> {
        let n = resolution as usize + 1;
        let h = 1.0 / resolution as f64;
        let mut v = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let y = f(p2(i as f64 * h, j as f64 * h));
                v.push([y.x, y.y]);
            }
        }
        SampledMap::new(resolution, v)
    }

    pub fn eval(&self, x: Point2) -> Result<Point2> {
        if !(0.0..=1.0).contains(&x.x) || !(0.0..=1.0).contains(&x.y) {
            return Err(Error::OutOfDomain(format!(
                "({}, {}) outside the sampled unit square",
                x.x, x.y
            )));
        }
        let r = self.resolution as f64;
        let n = self.resolution as usize + 1;
        let ci = (x.x * r).floor().min(r - 1.0).max(0.0) as usize;
        let cj = (x.y * r).floor().min(r - 1.0).max(0.0) as usize;
        let u = x.x * r - ci as f64;
        let v = x.y * r - cj as f64;
        let g = |i: usize, j: usize| {
            let w = self.vertex_images[j * n + i];
            p2(w[0], w[1])
        };
        let a = g(ci, cj);
        let b = g(ci + 1, cj);
        let c = g(ci + 1, cj + 1);
        let d = g(ci, cj + 1);
        Ok(a * ((1.0 - u) * (1.0 - v)) + b * (u * (1.0 - v)) + c * (u * v) + d * ((1.0 - u) * v))
    }

    pub fn jacobian(&self, x: Point2) -> Result<[[f64; 2]; 2]> {
        if !(0.0..=1.0).contains(&x.x) || !(0.0..=1.0).contains(&x.y) {
            return Err(Error::OutOfDomain("outside the sampled unit square".into()));
        }
        let r = self.resolution as f64;
        let n = self.resolution as usize + 1;
        let ci = (x.x * r).floor().min(r - 1.0).max(0.0) as usize;
        let cj = (x.y * r).floor().min(r - 1.0).max(0.0) as usize;
        let u = x.x * r - ci as f64;
        let v = x.y * r - cj as f64;
        let g = |i: usize, j: usize| {
            let w = self.vertex_images[j * n + i];
            p2(w[0], w[1])
        };
        let a = g(ci, cj);
        let b = g(ci + 1, cj);
        let c = g(ci + 1, cj + 1);
        let d = g(ci, cj + 1);
        let du = ((b - a) * (1.0 - v) + (c - d) * v) * r;
        let dv = ((d - a) * (1.0 - u) + (c - b) * u) * r;
        Ok([[du.x, dv.x], [du.y, dv.y]])
    }
}

// ---------------------------------------------------------------------
// The map interface

impl BoundaryMap {
    pub fn saw_shear(q: f64, depth: usize) -> Result<BoundaryMap> {
        Ok(BoundaryMap::SawShear(SawShear::new(q, depth)?))
    }

    pub fn cantor_shear(k: u32, depth: u32) -> Result<BoundaryMap> {
        Ok(BoundaryMap::CantorShear(CantorShear::new(k, depth)?))
    }

    pub fn radial_power(alpha: f64) -> Result<BoundaryMap> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("radial exponent must be in (0,1), got {alpha}")));
        }
        Ok(BoundaryMap::RadialPower { alpha })
    }

    /// Disk radial power re-seated on [0,1]^2 by the affine change of
    /// variables x -> 2x - 1: a self-homeomorphism of the square,
    /// identity outside the inscribed disk, singular at the center.
    pub fn radial_power_square(alpha: f64) -> Result<BoundaryMap> {
        Ok(BoundaryMap::Conjugated {
            pre: AffineMap { lin: [[2.0, 0.0], [0.0, 2.0]], off: [-1.0, -1.0] },
            inner: Box::new(BoundaryMap::radial_power(alpha)?),
            post: AffineMap { lin: [[0.5, 0.0], [0.0, 0.5]], off: [0.5, 0.5] },
        })
    }

    pub fn describe(&self) -> String {
        match self {
            BoundaryMap::Identity => "identity".into(),
            BoundaryMap::Affine(_) => "affine".into(),
            BoundaryMap::SawShear(s) => format!("saw_shear(q={}, n={:?})", s.q, s.n_seq),
            BoundaryMap::RadialPower { alpha } => format!("radial_power(alpha={alpha})"),
            BoundaryMap::CantorShear(c) => format!("cantor_shear(k={}, depth={})", c.k, c.depth),
            BoundaryMap::SmoothWarp { amp } => format!("smooth_warp(amp={amp})"),
            BoundaryMap::Sampled(s) => format!("sampled(resolution={})", s.resolution),
            BoundaryMap::Conjugated { inner, .. } => format!("conjugated({})", inner.describe()),
        }
    }

    pub fn eval(&self, x: Point2) -> Result<Point2> {
        match self {
            BoundaryMap::Identity => Ok(x),
            BoundaryMap::Affine(a) => Ok(a.apply(x)),
            BoundaryMap::SawShear(s) => Ok(p2(x.x, x.y + s.displacement(x.x))),
            BoundaryMap::RadialPower { alpha } => {
                let r = x.norm();
                if r >= 1.0 || r == 0.0 {
                    Ok(x)
                } else {
                    Ok(x * r.powf(alpha - 1.0))
                }
            }
            BoundaryMap::CantorShear(c) => Ok(p2(c.g(x.x), x.y)),
            BoundaryMap::SmoothWarp { amp } => Ok(p2(
                x.x + amp * (std::f64::consts::PI * x.x).sin() * (std::f64::consts::PI * x.y).sin(),
                x.y,
            )),
            BoundaryMap::Sampled(s) => s.eval(x),
            BoundaryMap::Conjugated { pre, inner, post } => {
                Ok(post.apply(inner.eval(pre.apply(x))?))
            }
        }
    }

    /// phi(x + d) - phi(x). The default route maps both endpoints; the
    /// saw shear instead forms x + d exactly, since its features live
    /// below f64 spacing around x.
    pub fn image_delta(&self, x: Point2, d: Point2) -> Result<Point2> {
        match self {
            BoundaryMap::SawShear(s) => {
                Ok(p2(d.x, d.y + s.displacement_delta(x.x, d.x)))
            }
            _ => Ok(self.eval(x + d)? - self.eval(x)?),
        }
    }

    /// Jacobian matrix where the map is differentiable; errors at
    /// genuine singular points (e.g. the radial power center).
    pub fn jacobian(&self, x: Point2) -> Result<[[f64; 2]; 2]> {
        match self {
            BoundaryMap::Identity => Ok([[1.0, 0.0], [0.0, 1.0]]),
            BoundaryMap::Affine(a) => Ok(a.lin),
            BoundaryMap::SawShear(s) => {
                Ok([[1.0, 0.0], [s.displacement_slope(x.x), 1.0]])
            }
            BoundaryMap::RadialPower { alpha } => {
                let r = x.norm();
                if r == 0.0 {
                    return Err(Error::UndefinedAt { x: x.x, y: x.y });
                }
                if r >= 1.0 {
                    return Ok([[1.0, 0.0], [0.0, 1.0]]);
                }
                let s = r.powf(alpha - 1.0);
                let (ux, uy) = (x.x / r, x.y / r);
                let c = alpha - 1.0;
                Ok([
                    [s * (1.0 + c * ux * ux), s * c * ux * uy],
                    [s * c * ux * uy, s * (1.0 + c * uy * uy)],
                ])
            }
            BoundaryMap::CantorShear(c) => {
                let (_, slope) = c.staircase_with_slope(x.x);
                Ok([[1.0 + slope, 0.0], [0.0, 1.0]])
            }
            BoundaryMap::SmoothWarp { amp } => {
                let pi = std::f64::consts::PI;
                Ok([
                    [
                        1.0 + amp * pi * (pi * x.x).cos() * (pi * x.y).sin(),
                        amp * pi * (pi * x.x).sin() * (pi * x.y).cos(),
                    ],
                    [0.0, 1.0],
                ])
            }
            BoundaryMap::Sampled(s) => s.jacobian(x),
            BoundaryMap::Conjugated { pre, inner, post } => {
                let j = inner.jacobian(pre.apply(x))?;
                Ok(mat_mul(post.lin, mat_mul(j, pre.lin)))
            }
        }
    }

    /// |Dphi| as the operator norm; NaN where undefined so quadrature
    /// can clip.
    pub fn grad_norm(&self, x: Point2) -> f64 {
        match self.jacobian(x) {
            Ok(j) => op_norm2(j),
            Err(_) => f64::NAN,
        }
    }

    /// Kink parameters along the segment [a, b] as fractions of the
    /// segment, when the image is piecewise linear with enumerably many
    /// pieces.
    pub fn edge_breakpoints(&self, a: Point2, b: Point2, cap: usize) -> Option<Vec<f64>> {
        match self {
            BoundaryMap::SawShear(s) => {
                if a.x == b.x {
                    return Some(Vec::new()); // vertical: rigid translation
                }
                let (lo, hi) = if a.x < b.x { (a.x, b.x) } else { (b.x, a.x) };
                let mut bp = s.breakpoints(lo, hi, cap)?;
                if a.x > b.x {
                    for t in bp.iter_mut() {
                        *t = 1.0 - *t;
                    }
                    bp.reverse();
                }
                Some(bp)
            }
            BoundaryMap::CantorShear(c) => {
                if a.x == b.x {
                    return Some(Vec::new());
                }
                let (lo, hi) = if a.x < b.x { (a.x, b.x) } else { (b.x, a.x) };
                let mut bp = c.breakpoints(lo, hi, cap)?;
                if a.x > b.x {
                    for t in bp.iter_mut() {
                        *t = 1.0 - *t;
                    }
                    bp.reverse();
                }
                Some(bp)
            }
            BoundaryMap::Identity | BoundaryMap::Affine(_) => Some(Vec::new()),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------
// Image measurements

/// Max pairwise distance among images of boundary samples of the closed
/// polygon, with nested doubling until the relative change drops below
/// `tol`. `n` is the initial per-side sample count (>= 2).
pub fn image_diameter(map: &BoundaryMap, poly: &[Point2], n: usize, tol: f64) -> Result<f64> {
    let mut per_side = n.max(2).next_power_of_two();
    let mut prev: Option<f64> = None;
    loop {
        let pts = sample_boundary_images(map, poly, per_side)?;
        let d = crate::plgeom::points_diameter(&pts);
        if let Some(p) = prev {
            if d > 0.0 && (d - p).abs() / d < tol {
                return Ok(d);
            }
        }
        prev = Some(d);
        per_side *= 2;
        if per_side > 1 << 14 {
            return Ok(prev.unwrap());
        }
    }
}

/// Inscribed polygonal length of the image of the closed polygon
/// boundary. Sampling per side is dyadic (nested across doublings) plus
/// any kink parameters the map can enumerate, so piecewise-linear images
/// measure exactly; refinement stops when the relative change drops
/// below `tol`. Nested sampling makes the result nondecreasing in n.
pub fn image_boundary_length(map: &BoundaryMap, poly: &[Point2], n: usize, tol: f64) -> Result<f64> {
    image_boundary_length_capped(map, poly, n, tol, 1 << 22)
}

/// [`image_boundary_length`] with an explicit cap on enumerated kink
/// parameters per side. Edges whose kink count exceeds the cap fall back
/// to plain dyadic refinement; bulk level sums use a small cap so maps
/// with exponentially many kinks stay affordable.
pub fn image_boundary_length_capped(
    map: &BoundaryMap,
    poly: &[Point2],
    n: usize,
    tol: f64,
    bp_cap: usize,
) -> Result<f64> {
    let m = poly.len();
    let mut per_side = n.max(4).next_power_of_two();
    let breakpoints: Vec<Option<Vec<f64>>> = (0..m)
        .map(|i| map.edge_breakpoints(poly[i], poly[(i + 1) % m], bp_cap))
        .collect();
    let mut prev: Option<f64> = None;
    loop {
        let mut total = 0.0;
        for i in 0..m {
            let a = poly[i];
            let b = poly[(i + 1) % m];
            let mut params: Vec<f64> = (0..=per_side).map(|s| s as f64 / per_side as f64).collect();
            if let Some(bp) = &breakpoints[i] {
                params.extend_from_slice(bp);
                params.sort_by(|x, y| x.partial_cmp(y).unwrap());
                params.dedup();
            }
            let mut last = map.eval(a)?;
            for &t in params.iter().skip(1) {
                let q = map.eval(a.lerp(b, t))?;
                total += last.dist(q);
                last = q;
            }
        }
        if let Some(p) = prev {
            if total > 0.0 && (total - p).abs() / total < tol {
                return Ok(total);
            }
        }
        prev = Some(total);
        per_side *= 2;
        if per_side > 1 << 20 {
            return Ok(prev.unwrap());
        }
    }
}

fn sample_boundary_images(
    map: &BoundaryMap,
    poly: &[Point2],
    per_side: usize,
) -> Result<Vec<Point2>> {
    let m = poly.len();
    let mut pts = Vec::with_capacity(m * per_side);
    for i in 0..m {
        let a = poly[i];
        let b = poly[(i + 1) % m];
        for s in 0..per_side {
            pts.push(map.eval(a.lerp(b, s as f64 / per_side as f64))?);
        }
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::DyadicSquare;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identity_and_affine_eval() {
        let id = BoundaryMap::Identity;
        assert_eq!(id.eval(p2(0.3, 0.7)).unwrap(), p2(0.3, 0.7));
        let aff = BoundaryMap::Affine(AffineMap {
            lin: [[2.0, 0.0], [0.0, 3.0]],
            off: [1.0, -1.0],
        });
        assert_eq!(aff.eval(p2(1.0, 1.0)).unwrap(), p2(3.0, 2.0));
        assert_eq!(op_norm2(aff.jacobian(p2(0.0, 0.0)).unwrap()), 3.0);
    }

    #[test]
    fn radial_power_norms() {
        let m = BoundaryMap::radial_power(0.5).unwrap();
        let x = p2(0.25, 0.0);
        let y = m.eval(x).unwrap();
        assert!((y.norm() - 0.5).abs() < 1e-12);
        // Direction preserved.
        let x2 = p2(0.15, 0.2);
        let y2 = m.eval(x2).unwrap();
        assert!((y2.norm() - x2.norm().sqrt()).abs() < 1e-12);
        assert!((y2.x / y2.norm() - x2.x / x2.norm()).abs() < 1e-12);
        // Identity on and outside the unit circle.
        assert_eq!(m.eval(p2(0.6, 0.8)).unwrap(), p2(0.6, 0.8));
        assert_eq!(m.eval(p2(2.0, 1.0)).unwrap(), p2(2.0, 1.0));
    }

    #[test]
    fn radial_power_square_presentation() {
        let m = BoundaryMap::radial_power_square(0.5).unwrap();
        // Square boundary fixed (outside the inscribed disk or on it).
        for &b in &[p2(0.0, 0.0), p2(1.0, 0.3), p2(0.5, 0.0), p2(0.2, 1.0)] {
            let y = m.eval(b).unwrap();
            assert!(y.dist(b) < 1e-12, "{b:?} moved to {y:?}");
        }
        // Points near the center get pulled outward (r -> sqrt r in
        // centered coordinates).
        let y = m.eval(p2(0.55, 0.5)).unwrap();
        assert!(((y.x - 0.5) * 2.0 - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((y.y - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cantor_standard_values() {
        let c = CantorShear::new(3, 40).unwrap();
        // Gap plateau values are exact.
        assert_eq!(c.staircase(0.5), 0.5);
        assert_eq!(c.staircase(0.4), 0.5);
        // 1/3 is not an f64; the staircase is only Holder-0.63 there, so
        // the 1-ulp input error admits ~3e-11 of output movement.
        assert!((c.staircase(1.0 / 3.0) - 0.5).abs() < 1e-9);
        let m = BoundaryMap::CantorShear(c);
        let y = m.eval(p2(1.0 / 3.0, 0.0)).unwrap();
        assert!((y.x - 5.0 / 6.0).abs() < 1e-9);
        assert_eq!(y.y, 0.0);
        // Holder exponent for the standard staircase: log 2 / log 3.
        let alpha = CantorShear::new(3, 40).unwrap().holder_alpha();
        assert!((alpha - 2f64.ln() / 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cantor_strictly_increasing() {
        let c = CantorShear::new(3, 24).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let x: f64 = rng.gen_range(-0.2..1.2);
            let y: f64 = rng.gen_range(-0.2..1.2);
            if x < y {
                assert!(c.g(x) < c.g(y), "g not strict at {x}, {y}");
            }
        }
    }

    #[test]
    fn saw_schedule_q2() {
        let s = SawShear::new(2.0, 4).unwrap();
        assert_eq!(s.n_seq, vec![5, 15, 35, 75]);
    }

    #[test]
    fn saw_schedule_minimal_exact_q2() {
        // Both schedule inequalities, squared into integer arithmetic at
        // q = 2: 10^(n - 4k) >= 4^k, and 10^n >= (8 * 10^k * sum)^2 with
        // sum = 2 * sum_{j<k} 10^(n_j - j). Each n_k passes; n_k - 1 must
        // fail at least one.
        let s = SawShear::new(2.0, 4).unwrap();
        let pow10 = |e: i64| -> Option<BigUint> {
            if e < 0 {
                None
            } else {
                Some(BigUint::from(10u32).pow(e as u32))
            }
        };
        let check = |k: usize, n: u32| -> bool {
            // first: 10^n >= 4^k * 10^{4k}  <=>  n - 4k >= log10(4^k)
            let lhs = BigUint::from(10u32).pow(n);
            let rhs = BigUint::from(4u32).pow(k as u32) * BigUint::from(10u32).pow(4 * k as u32);
            if lhs < rhs {
                return false;
            }
            // second (k >= 2): 10^n >= 64 * 10^{2k} * sum^2
            if k >= 2 {
                let mut sum = BigUint::zero();
                for (i, &nj) in s.n_seq.iter().enumerate().take(k - 1) {
                    sum += BigUint::from(2u32) * pow10(nj as i64 - (i as i64 + 1)).unwrap();
                }
                let rhs2 = BigUint::from(64u32) * BigUint::from(10u32).pow(2 * k as u32) * (&sum * &sum);
                if BigUint::from(10u32).pow(n) < rhs2 {
                    return false;
                }
            }
            true
        };
        for (i, &n) in s.n_seq.iter().enumerate() {
            let k = i + 1;
            assert!(check(k, n), "n_{k} = {n} fails its own inequalities");
            assert!(!check(k, n - 1), "n_{k} = {n} is not minimal");
        }
    }

    #[test]
    fn saw_exact_at_dyadic_points() {
        let s = SawShear::new(2.0, 1).unwrap(); // n = [5]
        // 0.25 * 10^5 = 25000 exactly: frac 0, saw 0.
        assert_eq!(s.displacement(0.25), 0.0);
        // 3/128 * 10^5 = 2343.75: frac 0.75, saw 0.5, weighted 0.05.
        let x = 3.0 / 128.0;
        assert!((s.displacement(x) - 0.05).abs() < 1e-15);
        // frac_pow10 periodicity across negatives.
        assert!((frac_pow10(-0.25 + 3.0 / 128.0, 5) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn saw_pair_delta_below_f64_spacing() {
        let s = SawShear::new(2.0, 4).unwrap();
        // Offset far below ulp(0.5): plain evaluation would see zero.
        let x = 0.5f64;
        let dx = 2f64.powi(-130);
        let d = s.displacement_delta(x, dx);
        // The finest tooth has slope +-2e75 * 1e-4; at this tiny offset
        // no tooth boundary is crossed generically, so |d| ~ slope * dx.
        let expect = s.n_seq.iter().enumerate().fold(0.0f64, |acc, (j, &n)| {
            acc + 0.1f64.powi(j as i32 + 1) * 2.0 * 10f64.powi(n as i32) * dx
        });
        assert!(d.abs() > 0.0, "pair delta lost below f64 spacing");
        assert!(d.abs() <= expect * 1.0001);
        // Against a coarse schedule the exact and naive paths agree.
        let s1 = SawShear::new(2.0, 1).unwrap();
        let (x, dx) = (0.123, 1e-7);
        let naive = s1.displacement(x + dx) - s1.displacement(x);
        assert!((s1.displacement_delta(x, dx) - naive).abs() < 1e-10);
    }

    #[test]
    fn saw_first_coordinate_preserved() {
        let m = BoundaryMap::saw_shear(2.0, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = p2(rng.gen::<f64>(), rng.gen::<f64>());
            let y = m.eval(x).unwrap();
            assert_eq!(y.x, x.x);
            assert!(y.y >= 0.0 && y.y <= 2.0);
        }
    }

    #[test]
    fn smooth_warp_fixes_boundary() {
        let m = BoundaryMap::SmoothWarp { amp: 0.1 };
        for t in 0..=10 {
            let t = t as f64 / 10.0;
            assert!(m.eval(p2(0.0, t)).unwrap().dist(p2(0.0, t)) < 1e-15);
            assert!(m.eval(p2(1.0, t)).unwrap().dist(p2(1.0, t)) < 1e-15);
            assert!(m.eval(p2(t, 0.0)).unwrap().dist(p2(t, 0.0)) < 1e-15);
            assert!(m.eval(p2(t, 1.0)).unwrap().dist(p2(t, 1.0)) < 1e-15);
        }
        // Positive Jacobian determinant (diffeomorphism check).
        let j = m.jacobian(p2(0.3, 0.6)).unwrap();
        assert!(j[0][0] * j[1][1] - j[0][1] * j[1][0] > 0.0);
    }

    #[test]
    fn injectivity_spot_check() {
        let zoo = vec![
            BoundaryMap::Identity,
            BoundaryMap::saw_shear(2.0, 2).unwrap(),
            BoundaryMap::radial_power(0.5).unwrap(),
            BoundaryMap::radial_power_square(0.35).unwrap(),
            BoundaryMap::cantor_shear(3, 24).unwrap(),
            BoundaryMap::SmoothWarp { amp: 0.1 },
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for m in &zoo {
            let pts: Vec<Point2> =
                (0..120).map(|_| p2(rng.gen::<f64>(), rng.gen::<f64>())).collect();
            let imgs: Vec<Point2> = pts.iter().map(|&x| m.eval(x).unwrap()).collect();
            for i in 0..imgs.len() {
                for j in i + 1..imgs.len() {
                    assert!(
                        imgs[i].dist(imgs[j]) > 1e-14,
                        "{} collapses samples {i}, {j}",
                        m.describe()
                    );
                }
            }
        }
    }

    #[test]
    fn diameter_identity_and_gap_cell() {
        let id = BoundaryMap::Identity;
        let sq = DyadicSquare { k: 3, i: 2, j: 5 };
        let d = image_diameter(&id, &sq.corners(), 8, 1e-3).unwrap();
        assert!((d - 2f64.sqrt() * 0.125).abs() < 1e-12);

        // Square inside the first Cantor gap (x in (1/3, 2/3)): the shear
        // is a rigid translation there.
        let c = BoundaryMap::cantor_shear(3, 24).unwrap();
        let sq = DyadicSquare { k: 3, i: 3, j: 0 }; // x in [3/8, 1/2]
        let d = image_diameter(&c, &sq.corners(), 8, 1e-3).unwrap();
        assert!((d - 2f64.sqrt() * 0.125).abs() < 1e-12);
    }

    #[test]
    fn diameter_radial_origin_cell_vs_dense() {
        let m = BoundaryMap::radial_power(0.5).unwrap();
        let k = 4u32;
        let sq = DyadicSquare { k, i: 0, j: 0 };
        let d = image_diameter(&m, &sq.corners(), 16, 1e-4).unwrap();
        // Dense brute force on the same boundary.
        let mut best = 0.0f64;
        let corners = sq.corners();
        let mut pts = Vec::new();
        for s in 0..4 {
            let (a, b) = (corners[s], corners[(s + 1) % 4]);
            for t in 0..2500 {
                pts.push(m.eval(a.lerp(b, t as f64 / 2500.0)).unwrap());
            }
        }
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                best = best.max(pts[i].dist(pts[j]));
            }
        }
        assert!((d - best).abs() / best < 2e-3, "sampled {d} vs dense {best}");
        // Scale sanity: diameter ~ (sqrt(2) 2^-k)^alpha.
        let scale = (2f64.sqrt() * 0.5f64.powi(k as i32)).sqrt();
        assert!(d / scale > 0.5 && d / scale < 2.0);
    }

    #[test]
    fn boundary_length_closed_forms() {
        let id = BoundaryMap::Identity;
        let sq = DyadicSquare { k: 2, i: 1, j: 1 };
        let l = image_boundary_length(&id, &sq.corners(), 16, 1e-3).unwrap();
        assert!((l - 4.0 * 0.25).abs() < 1e-12);

        // Saw shear truncated at one tooth scale: the bottom and top
        // edges map to graphs made of 2*10^5 linear pieces with slope
        // +-2*10^4; sides stay vertical unit segments.
        let s = BoundaryMap::saw_shear(2.0, 1).unwrap();
        let unit = [p2(0.0, 0.0), p2(1.0, 0.0), p2(1.0, 1.0), p2(0.0, 1.0)];
        let l = image_boundary_length(&s, &unit, 16, 1e-3).unwrap();
        let slope = 2.0 * 10f64.powi(4);
        let exact = 2.0 * (1.0 + slope * slope).sqrt() + 2.0;
        assert!((l - exact).abs() / exact < 1e-3, "{l} vs {exact}");

        // Cantor shear: edge images are straight segments; total 6.
        let c = BoundaryMap::cantor_shear(3, 8).unwrap();
        let l = image_boundary_length(&c, &unit, 16, 1e-3).unwrap();
        assert!((l - 6.0).abs() < 1e-2, "{l}");
    }

    #[test]
    fn length_monotone_and_dominates_diameter() {
        let zoo = vec![
            BoundaryMap::SmoothWarp { amp: 0.1 },
            BoundaryMap::radial_power(0.5).unwrap(),
            BoundaryMap::cantor_shear(3, 12).unwrap(),
        ];
        let sq = DyadicSquare { k: 1, i: 0, j: 0 };
        for m in &zoo {
            let mut prev = 0.0;
            for e in [2usize, 3, 4, 5, 6] {
                let mut total = 0.0;
                let per_side = 1usize << e;
                let c = sq.corners();
                for s in 0..4 {
                    let (a, b) = (c[s], c[(s + 1) % 4]);
                    let mut last = m.eval(a).unwrap();
                    for t in 1..=per_side {
                        let q = m.eval(a.lerp(b, t as f64 / per_side as f64)).unwrap();
                        total += last.dist(q);
                        last = q;
                    }
                }
                assert!(total >= prev - 1e-12, "{}: inscribed length decreased", m.describe());
                prev = total;
            }
            let d = image_diameter(m, &sq.corners(), 8, 1e-3).unwrap();
            let l = image_boundary_length(m, &sq.corners(), 16, 1e-3).unwrap();
            assert!(d <= l / 2.0 + 1e-9, "{}: diam {d} > len/2 {}", m.describe(), l / 2.0);
        }
    }

    #[test]
    fn sampled_map_roundtrip_and_eval() {
        let warp = BoundaryMap::SmoothWarp { amp: 0.1 };
        let s = SampledMap::from_fn(8, |x| warp.eval(x).unwrap()).unwrap();
        // Vertices reproduce exactly; interior bilinear is close.
        let m = BoundaryMap::Sampled(s.clone());
        assert!(m.eval(p2(0.25, 0.5)).unwrap().dist(warp.eval(p2(0.25, 0.5)).unwrap()) < 1e-12);
        assert!(m.eval(p2(0.3, 0.45)).unwrap().dist(warp.eval(p2(0.3, 0.45)).unwrap()) < 1e-2);
        assert!(m.eval(p2(1.5, 0.5)).is_err());

        let text = serde_json::to_string(&s).unwrap();
        let back: SampledMap = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn map_enum_serde_roundtrip() {
        let maps = vec![
            BoundaryMap::Identity,
            BoundaryMap::saw_shear(2.0, 2).unwrap(),
            BoundaryMap::radial_power_square(0.45).unwrap(),
            BoundaryMap::cantor_shear(3, 24).unwrap(),
        ];
        for m in maps {
            let text = serde_json::to_string(&m).unwrap();
            let back: BoundaryMap = serde_json::from_str(&text).unwrap();
            assert_eq!(back, m);
        }
    }
}
