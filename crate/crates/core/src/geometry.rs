//! Shared 3-D math: vectors, boxes, yaw-only rigid frames and z-y-x Euler angles.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Vec3 = Vector3<f64>;

/// Axis-aligned box, closed on all faces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn lo(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn hi(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn center(&self) -> Vec3 {
        (self.lo() + self.hi()) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.lo()) && self.contains(&other.hi())
    }

    /// Euclidean distance from `p` to the box (0 inside).
    pub fn distance(&self, p: &Vec3) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            let d = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            acc += d * d;
        }
        acc.sqrt()
    }

    /// Exact minimum distance between the segment `a -> b` and the box.
    ///
    /// The squared distance is a convex piecewise quadratic in the segment
    /// parameter; its pieces are delimited by the parameters where a
    /// coordinate crosses a face plane, and each piece is minimized in closed
    /// form.
    pub fn segment_distance(&self, a: &Vec3, b: &Vec3) -> f64 {
        let d = b - a;
        let mut knots = vec![0.0, 1.0];
        for i in 0..3 {
            if d[i].abs() > 0.0 {
                for bound in [self.min[i], self.max[i]] {
                    let t = (bound - a[i]) / d[i];
                    if t > 0.0 && t < 1.0 {
                        knots.push(t);
                    }
                }
            }
        }
        knots.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let point_at = |t: f64| a + d * t;
        let mut best = f64::INFINITY;
        for &t in &knots {
            best = best.min(self.distance(&point_at(t)));
        }
        for w in knots.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            if t1 - t0 <= 0.0 {
                continue;
            }
            // On this piece every coordinate is either inside its slab or clamped
            // to a fixed face; the active set is read off at the midpoint.
            let mid = point_at(0.5 * (t0 + t1));
            let (mut qa, mut qb) = (0.0, 0.0);
            for i in 0..3 {
                let target = if mid[i] < self.min[i] {
                    Some(self.min[i])
                } else if mid[i] > self.max[i] {
                    Some(self.max[i])
                } else {
                    None
                };
                if let Some(bound) = target {
                    // (a_i - bound + t d_i)^2
                    qa += d[i] * d[i];
                    qb += 2.0 * d[i] * (a[i] - bound);
                }
            }
            if qa > 0.0 {
                let t = (-qb / (2.0 * qa)).clamp(t0, t1);
                best = best.min(self.distance(&point_at(t)));
            }
        }
        best
    }
}

/// Rotation about +z.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// z-y-x (yaw, pitch, roll) Euler angles: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn euler_zyx_to_matrix(angles: [f64; 3]) -> Matrix3<f64> {
    rot_z(angles[0]) * rot_y(angles[1]) * rot_x(angles[2])
}

/// Partial derivatives of the z-y-x rotation with respect to each angle.
pub fn euler_zyx_jacobian(angles: [f64; 3]) -> [Matrix3<f64>; 3] {
    let (rz, ry, rx) = (rot_z(angles[0]), rot_y(angles[1]), rot_x(angles[2]));
    let (sz, cz) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sx, cx) = angles[2].sin_cos();
    let drz = Matrix3::new(-sz, -cz, 0.0, cz, -sz, 0.0, 0.0, 0.0, 0.0);
    let dry = Matrix3::new(-sy, 0.0, cy, 0.0, 0.0, 0.0, -cy, 0.0, -sy);
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sx, -cx, 0.0, cx, -sx);
    [drz * ry * rx, rz * dry * rx, rz * ry * drx]
}

/// Inverse of [`euler_zyx_to_matrix`] on the principal branch.
pub fn matrix_to_euler_zyx(r: &Matrix3<f64>) -> [f64; 3] {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    [yaw, pitch, roll]
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Pose of a rigid object on the table: position plus yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub position: [f64; 3],
    pub yaw: f64,
}

impl Default for ObjectPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl ObjectPose {
    pub fn identity() -> Self {
        Self { position: [0.0; 3], yaw: 0.0 }
    }

    pub fn new(position: Vec3, yaw: f64) -> Self {
        Self { position: position.into(), yaw: wrap_angle(yaw) }
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.yaw.is_finite()
    }

    /// World point into the object frame: `Rz(-yaw) * (p - position)`.
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        rot_z(-self.yaw) * (p - self.origin())
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        rot_z(self.yaw) * p + self.origin()
    }

    /// Rotate a free vector (displacement) from world into the object frame.
    pub fn vector_to_local(&self, v: &Vec3) -> Vec3 {
        rot_z(-self.yaw) * v
    }

    pub fn vector_to_world(&self, v: &Vec3) -> Vec3 {
        rot_z(self.yaw) * v
    }
}

/// Angle between two vectors in [0, pi].
pub fn angle_between(u: &Vec3, v: &Vec3) -> f64 {
    let c = u.dot(v) / (u.norm() * v.norm());
    c.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn segment_distance_matches_dense_sampling() {
        let b = Aabb::new([-0.1, -0.05, 0.0], [0.1, 0.05, 0.06]);
        let cases = [
            (Vec3::new(-0.3, -0.2, 0.1), Vec3::new(0.3, 0.2, 0.12)),
            (Vec3::new(0.0, -0.3, 0.03), Vec3::new(0.0, 0.3, 0.03)),
            (Vec3::new(0.2, 0.2, 0.2), Vec3::new(0.25, 0.3, 0.2)),
            (Vec3::new(0.15, -0.1, 0.02), Vec3::new(0.15, 0.1, 0.02)),
        ];
        for (a, c) in cases {
            let exact = b.segment_distance(&a, &c);
            let sampled = (0..=20000)
                .map(|i| b.distance(&(a + (c - a) * (i as f64 / 20000.0))))
                .fold(f64::INFINITY, f64::min);
            assert!(exact <= sampled + 1e-12);
            assert!(sampled - exact < 1e-5, "{exact} vs {sampled}");
        }
    }

    #[test]
    fn euler_round_trip_and_jacobian() {
        let angles = [0.4, -0.3, 1.1];
        let r = euler_zyx_to_matrix(angles);
        let back = matrix_to_euler_zyx(&r);
        for i in 0..3 {
            assert_relative_eq!(angles[i], back[i], epsilon = 1e-12);
        }
        let jac = euler_zyx_jacobian(angles);
        let h = 1e-6;
        for k in 0..3 {
            let mut p = angles;
            let mut m = angles;
            p[k] += h;
            m[k] -= h;
            let fd = (euler_zyx_to_matrix(p) - euler_zyx_to_matrix(m)) / (2.0 * h);
            assert!((fd - jac[k]).norm() < 1e-8);
        }
    }

    #[test]
    fn pose_round_trip() {
        let pose = ObjectPose::new(Vec3::new(0.2, -0.1, 0.0), 0.7);
        let p = Vec3::new(0.33, 0.5, 0.1);
        let back = pose.to_world(&pose.to_local(&p));
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(0.5), 0.5);
    }
}
