//! Planar geometry: vectors, SE(2) poses, oriented rectangles.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// Scalar 2-D cross product `self.x * o.y - self.y * o.x`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Rescales so the norm does not exceed `max`.
    pub fn clamp_norm(self, max: f64) -> Vec2 {
        let n = self.norm();
        if n > max && n > 0.0 {
            self * (max / n)
        } else {
            self
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Absolute wrapped difference between two angles.
pub fn angle_error(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Planar pose. `theta` is kept wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn from_parts(position: Vec2, theta: f64) -> Self {
        Self::new(position.x, position.y, theta)
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// World point expressed in this pose's frame.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position()).rotate(-self.theta)
    }

    /// Frame-local point expressed in world coordinates.
    pub fn to_world(&self, q: Vec2) -> Vec2 {
        q.rotate(self.theta) + self.position()
    }

    pub fn local_dir(&self, v: Vec2) -> Vec2 {
        v.rotate(-self.theta)
    }

    pub fn world_dir(&self, v: Vec2) -> Vec2 {
        v.rotate(self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Axis-aligned rectangle given by its min and max corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn contains_aabb(&self, o: &Aabb) -> bool {
        self.contains(o.min) && self.contains(o.max)
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }

    pub fn center(&self) -> Vec2 {
        (self.min + self.max) * 0.5
    }

    pub fn half_extents(&self) -> Vec2 {
        (self.max - self.min) * 0.5
    }

    pub fn as_rect(&self) -> Rect {
        let c = self.center();
        Rect::new(Pose2::new(c.x, c.y, 0.0), self.half_extents())
    }
}

/// Oriented rectangle: a pose plus half extents along its local axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub pose: Pose2,
    pub half: Vec2,
}

impl Rect {
    pub fn new(pose: Pose2, half: Vec2) -> Self {
        Self { pose, half }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let h = self.half;
        [
            self.pose.to_world(Vec2::new(h.x, h.y)),
            self.pose.to_world(Vec2::new(-h.x, h.y)),
            self.pose.to_world(Vec2::new(-h.x, -h.y)),
            self.pose.to_world(Vec2::new(h.x, -h.y)),
        ]
    }

    fn axes(&self) -> [Vec2; 2] {
        [
            Vec2::new(1.0, 0.0).rotate(self.pose.theta),
            Vec2::new(0.0, 1.0).rotate(self.pose.theta),
        ]
    }

    /// Depth by which `p` lies inside the rectangle; non-positive when outside.
    pub fn point_depth(&self, p: Vec2) -> f64 {
        let q = self.pose.to_local(p);
        (self.half.x - q.x.abs()).min(self.half.y - q.y.abs())
    }

    /// Euclidean distance from `p` to the rectangle (zero inside).
    pub fn distance_to(&self, p: Vec2) -> f64 {
        let q = self.pose.to_local(p);
        let dx = (q.x.abs() - self.half.x).max(0.0);
        let dy = (q.y.abs() - self.half.y).max(0.0);
        dx.hypot(dy)
    }

    /// Separating-axis penetration depth; non-positive when the rectangles are disjoint.
    pub fn penetration(&self, other: &Rect) -> f64 {
        let ca = self.corners();
        let cb = other.corners();
        let mut depth = f64::INFINITY;
        for axis in self.axes().into_iter().chain(other.axes()) {
            let (amin, amax) = project(&ca, axis);
            let (bmin, bmax) = project(&cb, axis);
            let overlap = amax.min(bmax) - amin.max(bmin);
            depth = depth.min(overlap);
        }
        depth
    }

    pub fn inside_aabb(&self, b: &Aabb) -> bool {
        self.corners().iter().all(|c| b.contains(*c))
    }

    pub fn circumradius(&self) -> f64 {
        self.half.norm()
    }
}

fn project(pts: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in pts {
        let d = p.dot(axis);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_keeps_pi_and_maps_minus_pi() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!(wrap_angle(0.5 + TAU) - 0.5 < 1e-12);
    }

    #[test]
    fn rect_penetration_sign() {
        let a = Rect::new(Pose2::new(0.0, 0.0, 0.0), Vec2::new(0.1, 0.05));
        let b = Rect::new(Pose2::new(0.25, 0.0, 0.0), Vec2::new(0.1, 0.05));
        assert!(a.penetration(&b) < 0.0);
        let c = Rect::new(Pose2::new(0.15, 0.0, 0.3), Vec2::new(0.1, 0.05));
        assert!(a.penetration(&c) > 0.0);
    }

    #[test]
    fn local_world_roundtrip() {
        let p = Pose2::new(0.3, -0.2, 1.1);
        let w = Vec2::new(0.7, 0.4);
        let back = p.to_world(p.to_local(w));
        assert!((back - w).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn wrapped_angle_in_range(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            prop_assert!(((a - w) / TAU - ((a - w) / TAU).round()).abs() < 1e-9);
        }

        #[test]
        fn penetration_symmetric(x in -0.3f64..0.3, y in -0.3f64..0.3, t in -3.0f64..3.0) {
            let a = Rect::new(Pose2::new(0.0, 0.0, 0.2), Vec2::new(0.08, 0.05));
            let b = Rect::new(Pose2::new(x, y, t), Vec2::new(0.06, 0.04));
            prop_assert!((a.penetration(&b) - b.penetration(&a)).abs() < 1e-12);
        }
    }
}
