//! Small 2D geometry helpers shared by the graph and metric code.

use serde::{Deserialize, Serialize};

/// A point in image coordinates: x grows right, y grows down, pixel centers
/// at integer coordinates, (0, 0) top-left.
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
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Projection of `p` onto segment `a`-`b`: returns (parameter t in [0,1],
/// projected point, distance from p to that point).
pub fn project_onto_segment(p: Point, a: Point, b: Point) -> (f64, Point, f64) {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let len2 = dx * dx + dy * dy;
    let t = if len2 <= 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    let q = Point::new(a.x + t * dx, a.y + t * dy);
    (t, q, p.dist(&q))
}

/// Perpendicular distance from `p` to the infinite line through `a`-`b`;
/// falls back to point distance when the segment is degenerate.
pub fn point_line_distance(p: Point, a: Point, b: Point) -> f64 {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let len = (dx * dx + dy * dy).sqrt();
    if len <= 0.0 {
        return p.dist(&a);
    }
    ((p.x - a.x) * dy - (p.y - a.y) * dx).abs() / len
}

/// Length of the part of segment `a`-`b` inside the axis-aligned rectangle
/// `[x0, x1] x [y0, y1]` (Liang-Barsky clipping).
pub fn clipped_length(a: Point, b: Point, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    let checks = [
        (-dx, a.x - x0),
        (dx, x1 - a.x),
        (-dy, a.y - y0),
        (dy, y1 - a.y),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return 0.0; // parallel and outside
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                if r > t1 {
                    return 0.0;
                }
                if r > t0 {
                    t0 = r;
                }
            } else {
                if r < t0 {
                    return 0.0;
                }
                if r < t1 {
                    t1 = r;
                }
            }
        }
    }
    (t1 - t0).max(0.0) * (dx * dx + dy * dy).sqrt()
}
