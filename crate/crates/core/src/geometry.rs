//! Polygon helpers shared by grade labelling and mask rasterization.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// x coordinate where edge `a -> b` crosses the horizontal line at `y`, if the
/// edge straddles it under the half-open rule `(a.y > y) != (b.y > y)`.
#[inline]
pub fn edge_crossing(a: Point, b: Point, y: f64) -> Option<f64> {
    if (a.y > y) != (b.y > y) {
        Some((b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x)
    } else {
        None
    }
}

/// Even-odd point-in-polygon test on an open ring.
pub fn contains(polygon: &[Point], p: Point) -> bool {
    let n = polygon.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        if let Some(x) = edge_crossing(polygon[i], polygon[j], p.y) {
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Appends to `out` every x where the polygon boundary crosses the line `y`.
pub fn scanline_crossings(polygon: &[Point], y: f64, out: &mut Vec<f64>) {
    let n = polygon.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        if let Some(x) = edge_crossing(polygon[i], polygon[j], y) {
            out.push(x);
        }
        j = i;
    }
}

/// Drops a repeated closing vertex and consecutive duplicates.
pub fn open_ring(mut ring: Vec<Point>) -> Vec<Point> {
    ring.dedup();
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

pub fn distinct_vertex_count(ring: &[Point]) -> usize {
    let mut seen: Vec<(u64, u64)> = ring.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection, touching endpoints included.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when no two edges of the open ring meet except adjacent edges at
/// their shared vertex.
pub fn is_simple(ring: &[Point]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    let edge = |i: usize| (ring[i], ring[(i + 1) % n]);
    for i in 0..n {
        let (a, b) = edge(i);
        // Adjacent edge folding back over this one.
        let (_, c) = edge((i + 1) % n);
        if orient(a, b, c) == 0.0 && (c.x - b.x) * (a.x - b.x) + (c.y - b.y) * (a.y - b.y) > 0.0 {
            return false;
        }
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (p, q) = edge(j);
            if segments_intersect(a, b, p, q) {
                return false;
            }
        }
    }
    true
}

/// Axis-aligned bounding box `(min_x, min_y, max_x, max_y)`.
pub fn bounds(ring: &[Point]) -> (f64, f64, f64, f64) {
    ring.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
    )
}
