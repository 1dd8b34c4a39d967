//! Planar vectors, angle helpers and oriented-box overlap.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_polar(radius: f64, angle: f64) -> Self {
        Self::new(radius * angle.cos(), radius * angle.sin())
    }

    pub fn unit(angle: f64) -> Self {
        Self::from_polar(1.0, angle)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Polar angle in `[0, 2π)`.
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x).rem_euclid(TAU)
    }

    /// Rotate by `-angle`, i.e. express in a frame whose x-axis points along `angle`.
    pub fn to_frame(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x + s * self.y, -s * self.x + c * self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
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

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to TAU for tiny negative inputs
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Oriented rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obb {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Obb {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            half_length: 0.5 * length,
            half_width: 0.5 * width,
        }
    }

    fn axes(&self) -> [Vec2; 2] {
        let u = Vec2::unit(self.heading);
        [u, Vec2::new(-u.y, u.x)]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [u, n] = self.axes();
        let (a, b) = (u * self.half_length, n * self.half_width);
        [
            self.center + a + b,
            self.center + a - b,
            self.center - a - b,
            self.center - a + b,
        ]
    }

    /// Half extent of the box projected onto unit `axis`.
    fn radius_along(&self, axis: Vec2) -> f64 {
        let [u, n] = self.axes();
        self.half_length * u.dot(axis).abs() + self.half_width * n.dot(axis).abs()
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let local = (p - self.center).to_frame(self.heading);
        local.x.abs() <= self.half_length && local.y.abs() <= self.half_width
    }

    /// Separating-axis test. Touching boxes count as overlapping.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let d = other.center - self.center;
        let reach = self.half_length.hypot(self.half_width) + other.half_length.hypot(other.half_width);
        if d.dot(d) > reach * reach {
            return false;
        }
        self.axes().into_iter().chain(other.axes()).all(|axis| {
            d.dot(axis).abs() <= self.radius_along(axis) + other.radius_along(axis)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = k as f64 * 0.7;
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((a - w) / TAU - ((a - w) / TAU).round()).abs() < 1e-9);
        }
        assert_eq!(wrap_angle(PI), -PI);
    }

    #[test]
    fn obb_basic_cases() {
        let a = Obb::new(Vec2::ZERO, 0.0, 5.0, 2.0);
        assert!(!a.overlaps(&Obb::new(Vec2::new(10.0, 0.0), 0.0, 5.0, 2.0)));
        assert!(a.overlaps(&a));
        // perpendicular, 3 m apart along the first box's axis
        assert!(a.overlaps(&Obb::new(Vec2::new(3.0, 0.0), PI / 2.0, 5.0, 2.0)));
        // side by side with 2 m of clearance
        assert!(!a.overlaps(&Obb::new(Vec2::new(0.0, 4.0), 0.0, 5.0, 2.0)));
    }
}
