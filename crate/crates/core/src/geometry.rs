//! Planar geometry for municipality polygons and grid cells.
//!
//! All distances and areas are computed on a metric planar system
//! (kilometres). Longitude/latitude inputs are projected once at ingest with
//! an equirectangular projection about the domain centre; the projection
//! parameters travel with artifact provenance. Polygons are simple rings
//! (optionally with interior holes); no topology repair is attempted.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Axis-aligned rectangle, used for reanalysis grid cells and lattice cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(CoreError::Geometry(format!(
                "invalid rectangle [{x0},{x1}]x[{y0},{y1}]"
            )));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Euclidean distance from `p` to the rectangle (zero when inside).
    pub fn dist_to_point(&self, p: &Point) -> f64 {
        let dx = (self.x0 - p.x).max(0.0).max(p.x - self.x1);
        let dy = (self.y0 - p.y).max(0.0).max(p.y - self.y1);
        (dx * dx + dy * dy).sqrt()
    }

    /// Positive-area intersection test with another rectangle.
    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

/// Simple closed ring. Vertices are stored without a repeated closing point,
/// oriented counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pts: Vec<Point>,
}

impl Ring {
    /// Validates and normalizes orientation. Rejects rings with fewer than
    /// three vertices or (numerically) zero area.
    pub fn new(mut pts: Vec<Point>) -> Result<Self> {
        if pts.len() > 1 && pts.first() == pts.last() {
            pts.pop();
        }
        if pts.len() < 3 {
            return Err(CoreError::Geometry(format!(
                "ring needs at least 3 distinct vertices, got {}",
                pts.len()
            )));
        }
        if pts.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(CoreError::Geometry("non-finite ring vertex".into()));
        }
        let a = signed_area(&pts);
        if a.abs() < 1e-12 {
            return Err(CoreError::Geometry("degenerate ring (zero area)".into()));
        }
        if a < 0.0 {
            pts.reverse();
        }
        Ok(Ring { pts })
    }

    pub fn points(&self) -> &[Point] {
        &self.pts
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.pts).abs()
    }

    /// Even-odd rule; boundary points are resolved by the ray cast and may
    /// land on either side, which is acceptable for membership assignment.
    pub fn contains(&self, p: &Point) -> bool {
        let mut inside = false;
        let n = self.pts.len();
        let mut j = n - 1;
        for i in 0..n {
            let (pi, pj) = (self.pts[i], self.pts[j]);
            if (pi.y > p.y) != (pj.y > p.y) {
                let x_cross = pj.x + (p.y - pj.y) / (pi.y - pj.y) * (pi.x - pj.x);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    fn bbox(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.pts {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }
}

/// Ring with optional interior holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub outer: Ring,
    pub holes: Vec<Ring>,
}

impl Polygon {
    pub fn new(outer: Ring, holes: Vec<Ring>) -> Self {
        Polygon { outer, holes }
    }

    pub fn area(&self) -> f64 {
        self.outer.area() - self.holes.iter().map(Ring::area).sum::<f64>()
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.outer.contains(p) && !self.holes.iter().any(|h| h.contains(p))
    }
}

/// One or more disjoint polygon parts; the municipality geometry type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPolygon {
    pub parts: Vec<Polygon>,
}

impl MultiPolygon {
    pub fn new(parts: Vec<Polygon>) -> Result<Self> {
        if parts.is_empty() {
            return Err(CoreError::Geometry("empty multipolygon".into()));
        }
        Ok(MultiPolygon { parts })
    }

    pub fn area(&self) -> f64 {
        self.parts.iter().map(Polygon::area).sum()
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.parts.iter().any(|part| part.contains(p))
    }

    pub fn bbox(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for part in &self.parts {
            let (l, h) = part.outer.bbox();
            lo.x = lo.x.min(l.x);
            lo.y = lo.y.min(l.y);
            hi.x = hi.x.max(h.x);
            hi.y = hi.y.max(h.y);
        }
        (lo, hi)
    }

    /// Area-weighted centroid over parts (holes subtracted).
    pub fn centroid(&self) -> Point {
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut a_tot = 0.0;
        for part in &self.parts {
            for (ring, sign) in std::iter::once((&part.outer, 1.0))
                .chain(part.holes.iter().map(|h| (h, -1.0)))
            {
                let pts = ring.points();
                let n = pts.len();
                let mut a = 0.0;
                let mut sx = 0.0;
                let mut sy = 0.0;
                for i in 0..n {
                    let p = pts[i];
                    let q = pts[(i + 1) % n];
                    let cross = p.x * q.y - q.x * p.y;
                    a += cross;
                    sx += (p.x + q.x) * cross;
                    sy += (p.y + q.y) * cross;
                }
                // Rings are CCW so a > 0; sign flips hole contributions.
                cx += sign * sx / 6.0;
                cy += sign * sy / 6.0;
                a_tot += sign * a / 2.0;
            }
        }
        Point::new(cx / a_tot, cy / a_tot)
    }
}

/// Clip a ring by one half-plane (Sutherland-Hodgman step).
fn clip_edge<I, X>(pts: &[Point], inside: I, cross: X) -> Vec<Point>
where
    I: Fn(&Point) -> bool,
    X: Fn(&Point, &Point) -> Point,
{
    let mut out = Vec::with_capacity(pts.len() + 4);
    let n = pts.len();
    for i in 0..n {
        let cur = pts[i];
        let prev = pts[(i + n - 1) % n];
        let cur_in = inside(&cur);
        let prev_in = inside(&prev);
        if cur_in {
            if !prev_in {
                out.push(cross(&prev, &cur));
            }
            out.push(cur);
        } else if prev_in {
            out.push(cross(&prev, &cur));
        }
    }
    out
}

/// Intersection of a ring with an axis-aligned rectangle, as a vertex list
/// (possibly empty). The rectangle is convex so Sutherland-Hodgman is exact.
fn clip_ring_rect(ring: &Ring, r: &Rect) -> Vec<Point> {
    let t = |a: &Point, b: &Point, c: f64, vertical: bool| -> Point {
        if vertical {
            let s = (c - a.x) / (b.x - a.x);
            Point::new(c, a.y + s * (b.y - a.y))
        } else {
            let s = (c - a.y) / (b.y - a.y);
            Point::new(a.x + s * (b.x - a.x), c)
        }
    };
    let mut pts = ring.points().to_vec();
    pts = clip_edge(&pts, |p| p.x >= r.x0, |a, b| t(a, b, r.x0, true));
    if pts.is_empty() {
        return pts;
    }
    pts = clip_edge(&pts, |p| p.x <= r.x1, |a, b| t(a, b, r.x1, true));
    if pts.is_empty() {
        return pts;
    }
    pts = clip_edge(&pts, |p| p.y >= r.y0, |a, b| t(a, b, r.y0, false));
    if pts.is_empty() {
        return pts;
    }
    clip_edge(&pts, |p| p.y <= r.y1, |a, b| t(a, b, r.y1, false))
}

/// Area of the intersection between a (multi)polygon and a rectangle.
///
/// Holes subtract their own clipped area; the result is clamped to
/// `[0, min(polygon area, cell area)]` to absorb rounding at shared edges.
pub fn overlap_area(mp: &MultiPolygon, cell: &Rect) -> f64 {
    let mut total = 0.0;
    for part in &mp.parts {
        let outer = clip_ring_rect(&part.outer, cell);
        if outer.len() < 3 {
            continue;
        }
        let mut a = signed_area(&outer).abs();
        for hole in &part.holes {
            let h = clip_ring_rect(hole, cell);
            if h.len() >= 3 {
                a -= signed_area(&h).abs();
            }
        }
        total += a;
    }
    total.clamp(0.0, mp.area().min(cell.area()))
}

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Equirectangular projection about a reference point; adequate for
/// regional domains of a few hundred kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub lon0: f64,
    pub lat0: f64,
}

impl Projection {
    pub fn new(lon0: f64, lat0: f64) -> Self {
        Projection { lon0, lat0 }
    }

    pub fn to_km(&self, lon: f64, lat: f64) -> Point {
        let rad = std::f64::consts::PI / 180.0;
        Point::new(
            EARTH_RADIUS_KM * (lon - self.lon0) * rad * (self.lat0 * rad).cos(),
            EARTH_RADIUS_KM * (lat - self.lat0) * rad,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square(cx: f64, cy: f64, half: f64) -> MultiPolygon {
        let ring = Ring::new(vec![
            Point::new(cx - half, cy - half),
            Point::new(cx + half, cy - half),
            Point::new(cx + half, cy + half),
            Point::new(cx - half, cy + half),
        ])
        .unwrap();
        MultiPolygon::new(vec![Polygon::new(ring, vec![])]).unwrap()
    }

    #[test]
    fn unit_square_offset_cell_overlap_is_quarter() {
        let sq = square(0.5, 0.5, 0.5);
        let cell = Rect::new(0.5, 0.5, 1.5, 1.5).unwrap();
        assert_relative_eq!(overlap_area(&sq, &cell), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_cell_overlap_is_zero() {
        let sq = square(0.5, 0.5, 0.5);
        let cell = Rect::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert_eq!(overlap_area(&sq, &cell), 0.0);
    }

    #[test]
    fn containing_cell_gives_full_area() {
        let sq = square(0.5, 0.5, 0.5);
        let cell = Rect::new(-1.0, -1.0, 2.0, 2.0).unwrap();
        assert_relative_eq!(overlap_area(&sq, &cell), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_ring_is_rejected() {
        let r = Ring::new(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(2.0, 2.0),
        ]);
        assert!(r.is_err());
        assert!(Ring::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]).is_err());
    }

    #[test]
    fn hole_subtracts_from_overlap() {
        let outer = Ring::new(vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(4.0, 4.0),
            Point::new(0.0, 4.0),
        ])
        .unwrap();
        let hole = Ring::new(vec![
            Point::new(1.0, 1.0),
            Point::new(3.0, 1.0),
            Point::new(3.0, 3.0),
            Point::new(1.0, 3.0),
        ])
        .unwrap();
        let mp = MultiPolygon::new(vec![Polygon::new(outer, vec![hole])]).unwrap();
        assert_relative_eq!(mp.area(), 12.0, epsilon = 1e-12);
        let cell = Rect::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_relative_eq!(overlap_area(&mp, &cell), 3.0, epsilon = 1e-12);
        assert!(mp.contains(&Point::new(0.5, 0.5)));
        assert!(!mp.contains(&Point::new(2.0, 2.0)));
    }

    #[test]
    fn centroid_of_square_is_center() {
        let sq = square(3.0, -2.0, 1.5);
        let c = sq.centroid();
        assert_relative_eq!(c.x, 3.0, epsilon = 1e-12);
        assert_relative_eq!(c.y, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_is_locally_metric() {
        let proj = Projection::new(12.5, 41.9);
        let p = proj.to_km(12.5, 41.9);
        assert_eq!((p.x, p.y), (0.0, 0.0));
        // One degree of latitude is about 111.2 km.
        let q = proj.to_km(12.5, 42.9);
        assert_relative_eq!(q.y, 111.19, epsilon = 0.1);
    }
}
