//! Geodesics in a closed PL Jordan domain: triangulate, walk the dual
//! tree, then string-pull through the portal sequence.

use crate::error::{Error, Result};
use crate::plgeom::{
    orient2d, point_in_triangle, triangulate, JordanPolygon, Orientation, Point2, PolyLine,
};

/// Shortest curve between two points of the closed polygon. Vertices of
/// the result are a subset of {a, b} plus polygon vertices; collinear
/// pass-through vertices are removed.
pub fn shortest_path(poly: &JordanPolygon, a: Point2, b: Point2) -> Result<PolyLine> {
    if poly.locate(a) == crate::plgeom::PointLocation::Outside {
        return Err(Error::OutOfDomain(format!("start ({}, {}) outside domain", a.x, a.y)));
    }
    if poly.locate(b) == crate::plgeom::PointLocation::Outside {
        return Err(Error::OutOfDomain(format!("end ({}, {}) outside domain", b.x, b.y)));
    }
    if a == b {
        return PolyLine::new(vec![a]);
    }

    let tris = triangulate(poly)?;
    let verts = poly.verts();
    let pt = |i: usize| verts[i];

    let find = |p: Point2| -> Option<usize> {
        tris.iter()
            .position(|t| point_in_triangle(pt(t[0]), pt(t[1]), pt(t[2]), p))
    };
    let ta = find(a).ok_or_else(|| {
        Error::ConstructionFailed("start not located in any triangle".into())
    })?;
    let tb = find(b).ok_or_else(|| {
        Error::ConstructionFailed("end not located in any triangle".into())
    })?;

    if ta == tb {
        return simplify_path(vec![a, b]);
    }

    // Dual adjacency over shared undirected edges; the dual of a
    // triangulated simple polygon is a tree, so the BFS path is the
    // unique corridor.
    let corridor = dual_path(&tris, ta, tb).ok_or_else(|| {
        Error::ConstructionFailed("triangulation dual is disconnected".into())
    })?;

    let mut portals: Vec<(Point2, Point2)> = Vec::with_capacity(corridor.len() + 1);
    portals.push((a, a));
    for w in corridor.windows(2) {
        let (u, v) = shared_directed_edge(&tris[w[0]], &tris[w[1]]).ok_or_else(|| {
            Error::ConstructionFailed("corridor triangles share no edge".into())
        })?;
        // (u -> v) is the directed occurrence in the CCW first triangle;
        // crossing it, the walker sees v on the left.
        portals.push((pt(v), pt(u)));
    }
    portals.push((b, b));

    simplify_path(string_pull(&portals))
}

fn dual_path(tris: &[[usize; 3]], from: usize, to: usize) -> Option<Vec<usize>> {
    let n = tris.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if shared_directed_edge(&tris[i], &tris[j]).is_some() {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let mut prev: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    seen[from] = true;
    queue.push_back(from);
    while let Some(t) = queue.pop_front() {
        if t == to {
            let mut path = vec![to];
            let mut cur = to;
            while let Some(p) = prev[cur] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for &u in &adj[t] {
            if !seen[u] {
                seen[u] = true;
                prev[u] = Some(t);
                queue.push_back(u);
            }
        }
    }
    None
}

/// The directed edge (u -> v) of `first` whose reversal appears in
/// `second`, as vertex indices.
fn shared_directed_edge(first: &[usize; 3], second: &[usize; 3]) -> Option<(usize, usize)> {
    for s in 0..3 {
        let u = first[s];
        let v = first[(s + 1) % 3];
        for t in 0..3 {
            if second[t] == v && second[(t + 1) % 3] == u {
                return Some((u, v));
            }
        }
    }
    None
}

/// Funnel over the portal list; first and last portals are the
/// degenerate (start, start) and (end, end).
fn string_pull(portals: &[(Point2, Point2)]) -> Vec<Point2> {
    let mut path = vec![portals[0].0];
    let mut apex = portals[0].0;
    let mut left = apex;
    let mut right = apex;
    let mut apex_i;
    let mut left_i = 0usize;
    let mut right_i = 0usize;

    let mut i = 1;
    while i < portals.len() {
        let (pl, pr) = portals[i];

        // Tighten the right side: pr must not widen the funnel.
        if orient2d(apex, right, pr) != Orientation::Cw {
            if apex == right || orient2d(apex, left, pr) == Orientation::Cw {
                right = pr;
                right_i = i;
            } else {
                // Right sweep crossed the left boundary: the left point
                // is on the geodesic.
                if left != apex {
                    path.push(left);
                }
                apex = left;
                apex_i = left_i;
                left = apex;
                right = apex;
                left_i = apex_i;
                right_i = apex_i;
                i = apex_i + 1;
                continue;
            }
        }

        // Tighten the left side.
        if orient2d(apex, left, pl) != Orientation::Ccw {
            if apex == left || orient2d(apex, right, pl) == Orientation::Ccw {
                left = pl;
                left_i = i;
            } else {
                if right != apex {
                    path.push(right);
                }
                apex = right;
                apex_i = right_i;
                left = apex;
                right = apex;
                left_i = apex_i;
                right_i = apex_i;
                i = apex_i + 1;
                continue;
            }
        }

        i += 1;
    }
    path.push(portals[portals.len() - 1].0);
    path
}

/// Removes repeated and collinear pass-through vertices.
pub fn simplify_path(pts: Vec<Point2>) -> Result<PolyLine> {
    let mut out: Vec<Point2> = Vec::with_capacity(pts.len());
    for p in pts {
        if out.last() == Some(&p) {
            continue;
        }
        while out.len() >= 2 {
            let m = out.len();
            let (u, v) = (out[m - 2], out[m - 1]);
            if orient2d(u, v, p) == Orientation::Collinear
                && (v - u).dot(p - v) >= 0.0
            {
                out.pop();
            } else {
                break;
            }
        }
        out.push(p);
    }
    PolyLine::new(out)
}
