//! Planar primitives shared by labeling, synthesis and exploration.

use serde::{Deserialize, Serialize};

/// A point in the (G1, G2) plane. Units depend on context (volts or pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

/// Closed axis-aligned box `[min.x, max.x] × [min.y, max.y]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn new(min: Point, max: Point) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x) * (self.max.y - self.min.y)
    }

    pub fn clamp(&self, p: Point) -> Point {
        Point::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }

    /// Parameter interval `[lo, hi]` of the line `origin + s·dir` lying inside
    /// the box, or `None` when the line misses it (Liang–Barsky).
    pub fn line_interval(&self, origin: Point, dir: Point) -> Option<(f64, f64)> {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (o, d, min, max) in [
            (origin.x, dir.x, self.min.x, self.max.x),
            (origin.y, dir.y, self.min.y, self.max.y),
        ] {
            if d == 0.0 {
                if o < min || o > max {
                    return None;
                }
            } else {
                let a = (min - o) / d;
                let b = (max - o) / d;
                lo = lo.max(a.min(b));
                hi = hi.min(a.max(b));
            }
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// True when the closed segment `a–b` touches the closed box.
    pub fn intersects_segment(&self, a: Point, b: Point) -> bool {
        match self.line_interval(a, b - a) {
            Some((lo, hi)) => hi >= 0.0 && lo <= 1.0,
            None => false,
        }
    }

    pub fn corners(&self) -> [Point; 4] {
        [
            self.min,
            Point::new(self.max.x, self.min.y),
            self.max,
            Point::new(self.min.x, self.max.y),
        ]
    }
}

/// Shoelace area, positive for counter-clockwise rings.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    acc / 2.0
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let ab = b - a;
    let ap = p - a;
    if ab.x == 0.0 && ab.y == 0.0 {
        return ap.x == 0.0 && ap.y == 0.0;
    }
    let cross = ab.x * ap.y - ab.y * ap.x;
    if cross.abs() > 1e-10 * ab.norm() * ap.norm().max(ab.norm()) {
        return false;
    }
    let t = ap.dot(ab);
    t >= -1e-12 && t <= ab.dot(ab) * (1.0 + 1e-12)
}

/// Point-in-polygon where the boundary counts as inside.
pub fn contains_closed(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if on_segment(p, a, b) {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Sutherland–Hodgman clip of `subject` against an axis-aligned box.
pub fn clip_to_box(subject: &[Point], bx: &Aabb) -> Vec<Point> {
    type Edge = (fn(Point, &Aabb) -> bool, fn(Point, Point, &Aabb) -> Point);
    let edges: [Edge; 4] = [
        (|p, b| p.x >= b.min.x, |p, q, b| lerp_at_x(p, q, b.min.x)),
        (|p, b| p.x <= b.max.x, |p, q, b| lerp_at_x(p, q, b.max.x)),
        (|p, b| p.y >= b.min.y, |p, q, b| lerp_at_y(p, q, b.min.y)),
        (|p, b| p.y <= b.max.y, |p, q, b| lerp_at_y(p, q, b.max.y)),
    ];
    let mut out: Vec<Point> = subject.to_vec();
    for (inside, cut) in edges {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        let mut prev = *input.last().expect("non-empty");
        for &cur in &input {
            match (inside(cur, bx), inside(prev, bx)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cut(prev, cur, bx));
                    out.push(cur);
                }
                (false, true) => out.push(cut(prev, cur, bx)),
                (false, false) => {}
            }
            prev = cur;
        }
    }
    dedup_ring(out)
}

fn lerp_at_x(p: Point, q: Point, x: f64) -> Point {
    let t = (x - p.x) / (q.x - p.x);
    Point::new(x, p.y + t * (q.y - p.y))
}

fn lerp_at_y(p: Point, q: Point, y: f64) -> Point {
    let t = (y - p.y) / (q.y - p.y);
    Point::new(p.x + t * (q.x - p.x), y)
}

fn dedup_ring(mut ring: Vec<Point>) -> Vec<Point> {
    ring.dedup_by(|a, b| (a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    while ring.len() > 1 {
        let (f, l) = (ring[0], ring[ring.len() - 1]);
        if (f.x - l.x).abs() < 1e-12 && (f.y - l.y).abs() < 1e-12 {
            ring.pop();
        } else {
            break;
        }
    }
    ring
}

/// True when two closed segments share at least one point.
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    fn orient(p: Point, q: Point, r: Point) -> f64 {
        (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x)
    }
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    (o1 == 0.0 && on_segment(c, a, b))
        || (o2 == 0.0 && on_segment(d, a, b))
        || (o3 == 0.0 && on_segment(a, c, d))
        || (o4 == 0.0 && on_segment(b, c, d))
}

/// True when a ring has no two non-adjacent edges that touch.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}
