//! Small 2D geometry toolkit shared by the scene model, planner, and simulator.

use serde::{Deserialize, Serialize};

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_to_pi(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    /// Unit vector for a heading angle.
    pub fn from_heading(heading: f64) -> Vec2 {
        Vec2::new(heading.cos(), heading.sin())
    }

    /// Perpendicular (rotated +90 degrees).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// Simple polygon given by its vertices in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Vec2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        Self { vertices }
    }

    /// Axis-aligned rectangle helper.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(vec![
            Vec2::new(x0, y0),
            Vec2::new(x1, y0),
            Vec2::new(x1, y1),
            Vec2::new(x0, y1),
        ])
    }

    /// Ray-casting point-in-polygon test. Points on an edge count as inside.
    pub fn contains(&self, p: Vec2) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[j];
            if point_on_segment(p, a, b) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let t = (p.y - a.y) / (b.y - a.y);
                if p.x < a.x + t * (b.x - a.x) {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

fn point_on_segment(p: Vec2, a: Vec2, b: Vec2) -> bool {
    let ab = b - a;
    let ap = p - a;
    let cross = ab.x * ap.y - ab.y * ap.x;
    if cross.abs() > 1e-9 {
        return false;
    }
    let d = ab.dot(ap);
    d >= -1e-9 && d <= ab.dot(ab) + 1e-9
}

/// Oriented rectangle footprint (vehicle body).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn corners(&self) -> [Vec2; 4] {
        let fwd = Vec2::from_heading(self.heading).scale(self.length / 2.0);
        let side = Vec2::from_heading(self.heading).perp().scale(self.width / 2.0);
        [
            self.center + fwd + side,
            self.center + fwd - side,
            self.center - fwd - side,
            self.center - fwd + side,
        ]
    }

    /// Separating-axis overlap test between two oriented rectangles.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let ca = self.corners();
        let cb = other.corners();
        let axes = [
            Vec2::from_heading(self.heading),
            Vec2::from_heading(self.heading).perp(),
            Vec2::from_heading(other.heading),
            Vec2::from_heading(other.heading).perp(),
        ];
        for axis in axes {
            let (a_min, a_max) = project(&ca, axis);
            let (b_min, b_max) = project(&cb, axis);
            if a_max < b_min || b_max < a_min {
                return false;
            }
        }
        true
    }
}

fn project(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for c in corners {
        let d = c.dot(axis);
        min = min.min(d);
        max = max.max(d);
    }
    (min, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_covers_both_ends() {
        assert!((wrap_to_pi(PI) - (-PI)).abs() < 1e-12);
        assert!((wrap_to_pi(-PI) - (-PI)).abs() < 1e-12);
        assert!((wrap_to_pi(3.0 * PI) - (-PI)).abs() < 1e-12);
        assert!((wrap_to_pi(0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn polygon_contains() {
        let poly = Polygon::rect(0.0, 0.0, 10.0, 4.0);
        assert!(poly.contains(Vec2::new(5.0, 2.0)));
        assert!(poly.contains(Vec2::new(0.0, 0.0)));
        assert!(!poly.contains(Vec2::new(11.0, 2.0)));
        assert!(!poly.contains(Vec2::new(5.0, -0.1)));
    }

    #[test]
    fn rect_overlap_symmetry() {
        let a = OrientedRect { center: Vec2::new(0.0, 0.0), heading: 0.0, length: 4.5, width: 2.0 };
        let b = OrientedRect { center: Vec2::new(4.0, 0.5), heading: 0.4, length: 4.5, width: 2.0 };
        let c = OrientedRect { center: Vec2::new(10.0, 0.0), heading: 0.0, length: 4.5, width: 2.0 };
        assert!(a.overlaps(&b));
        assert!(b.overlaps(&a));
        assert!(!a.overlaps(&c));
        assert!(!c.overlaps(&a));
    }

    #[test]
    fn rotated_rects_near_miss() {
        // Diagonal rect whose AABB overlaps but body does not.
        let a = OrientedRect { center: Vec2::new(0.0, 0.0), heading: 0.0, length: 4.0, width: 1.0 };
        let b = OrientedRect { center: Vec2::new(3.5, 2.0), heading: PI / 4.0, length: 4.0, width: 1.0 };
        assert!(!a.overlaps(&b));
        assert!(b.overlaps(&b));
    }
}
