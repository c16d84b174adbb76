//! Small 3D vector toolkit used by the rule calculators.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::landmarks::Landmark;

/// Below this length a vector is treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Drops the depth component.
    pub fn planar(self) -> Vec3 {
        Vec3::new(self.x, self.y, 0.0)
    }
}

impl From<Landmark> for Vec3 {
    fn from(l: Landmark) -> Self {
        Vec3::new(l.x, l.y, l.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Angle between two vectors in degrees, `None` if either is degenerate.
pub fn angle_deg(a: Vec3, b: Vec3) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na < DEGENERATE_EPS || nb < DEGENERATE_EPS {
        return None;
    }
    let cos = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Some(cos.acos().to_degrees())
}

/// Which coordinates enter distance-based rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// Image-plane distance, ignoring depth.
    #[default]
    Xy,
    Xyz,
}

impl DistanceMode {
    pub fn project(self, v: Vec3) -> Vec3 {
        match self {
            DistanceMode::Xy => v.planar(),
            DistanceMode::Xyz => v,
        }
    }

    pub fn distance(self, a: Vec3, b: Vec3) -> f64 {
        self.project(a - b).norm()
    }
}

/// Distance from `p` to the closed segment `a`–`b`.
pub fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 < DEGENERATE_EPS * DEGENERATE_EPS {
        return (p - a).norm();
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Distance from `p` to a polyline given by its vertices (at least one).
pub fn point_polyline_distance(p: Vec3, vertices: &[Vec3]) -> f64 {
    match vertices {
        [] => f64::INFINITY,
        [only] => (p - *only).norm(),
        _ => vertices
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}
