//! Independent geodesic oracle: visibility graph over the endpoints and
//! polygon vertices, then Dijkstra. Quadratic and test-oriented; kept
//! deliberately separate from the funnel route so the two can check
//! each other.

use crate::error::{Error, Result};
use crate::plgeom::{
    orient2d, segments_intersect, JordanPolygon, Orientation, Point2, PointLocation, PolyLine,
    SegmentMeet,
};

pub fn shortest_path_oracle(poly: &JordanPolygon, a: Point2, b: Point2) -> Result<PolyLine> {
    if poly.locate(a) == PointLocation::Outside {
        return Err(Error::OutOfDomain("start outside domain".into()));
    }
    if poly.locate(b) == PointLocation::Outside {
        return Err(Error::OutOfDomain("end outside domain".into()));
    }
    if a == b {
        return PolyLine::new(vec![a]);
    }

    let mut nodes: Vec<Point2> = vec![a, b];
    nodes.extend_from_slice(poly.verts());
    let n = nodes.len();

    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if nodes[i] == nodes[j] {
                adj[i].push((j, 0.0));
                adj[j].push((i, 0.0));
                continue;
            }
            if segment_in_closure(poly, nodes[i], nodes[j])? {
                let w = nodes[i].dist(nodes[j]);
                adj[i].push((j, w));
                adj[j].push((i, w));
            }
        }
    }

    // Dijkstra from node 0 (= a) to node 1 (= b).
    let mut dist = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<usize>> = vec![None; n];
    dist[0] = 0.0;
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(HeapItem { cost: 0.0, node: 0 });
    while let Some(HeapItem { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        if node == 1 {
            break;
        }
        for &(next, w) in &adj[node] {
            let c = cost + w;
            if c < dist[next] {
                dist[next] = c;
                prev[next] = Some(node);
                heap.push(HeapItem { cost: c, node: next });
            }
        }
    }
    if dist[1].is_infinite() {
        return Err(Error::ConstructionFailed(
            "endpoints not connected in visibility graph".into(),
        ));
    }
    let mut chain = vec![1usize];
    let mut cur = 1usize;
    while let Some(p) = prev[cur] {
        chain.push(p);
        cur = p;
    }
    chain.reverse();
    super::funnel::simplify_path(chain.into_iter().map(|i| nodes[i]).collect())
}

struct HeapItem {
    cost: f64,
    node: usize,
}
impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.node == other.node
    }
}
impl Eq for HeapItem {}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap on cost.
        other.cost.total_cmp(&self.cost).then(other.node.cmp(&self.node))
    }
}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Whether the closed segment [u, w] stays inside the closed polygon.
/// No polygon side may properly cross it, and between consecutive
/// boundary touches the segment must not run outside (a straight shot
/// through a reflex vertex can leave the domain without any proper
/// crossing, so every touch-gap midpoint is located explicitly).
fn segment_in_closure(poly: &JordanPolygon, u: Point2, w: Point2) -> Result<bool> {
    let mut touch_params: Vec<f64> = vec![0.0, 1.0];
    for s in 0..poly.len() {
        let (p, q) = poly.side(s);
        match segments_intersect(u, w, p, q)? {
            SegmentMeet::InteriorCross => return Ok(false),
            SegmentMeet::Disjoint => {}
            SegmentMeet::EndpointTouch | SegmentMeet::Overlap => {
                for cand in [p, q] {
                    if on_segment(u, w, cand) {
                        touch_params.push(param_on(u, w, cand));
                    }
                }
                for cand in [u, w] {
                    if on_segment(p, q, cand) {
                        touch_params.push(param_on(u, w, cand));
                    }
                }
            }
        }
    }
    touch_params.sort_by(|x, y| x.partial_cmp(y).unwrap());
    touch_params.dedup();
    for g in touch_params.windows(2) {
        let mid = u.lerp(w, (g[0] + g[1]) / 2.0);
        if poly.locate(mid) == PointLocation::Outside {
            return Ok(false);
        }
    }
    Ok(true)
}

fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    if orient2d(a, b, p) != Orientation::Collinear {
        return false;
    }
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn param_on(a: Point2, b: Point2, p: Point2) -> f64 {
    let d = b - a;
    let t = (p - a).dot(d) / d.dot(d);
    t.clamp(0.0, 1.0)
}
